"""
Scoring captions for object hallucination
=========================================

CHAIR compares the objects a caption mentions against the objects annotated
for its image. Mentions resolve through a synonym table with word-boundary
matching, deduplicate per image, and anything unannotated counts as
hallucinated. The instance rate divides hallucinated mentions by all
mentions; the sentence rate divides flagged captions by all captions.
"""

from kvprune import AnnotationSet, chair_score

annotations = AnnotationSet(
    objects={
        "kitchen": {"cup", "table", "window"},
        "park": {"dog", "frisbee", "tree"},
        "street": {"car", "person"},
    },
    synonyms={
        "mug": "cup", "puppy": "dog", "automobile": "car",
        "man": "person", "woman": "person", "frisbees": "frisbee",
    },
)

captions = [
    ("park", "A dog leaps for a frisbee under a tree."),
    ("park", "The puppy carries two frisbees past a bench."),
    ("kitchen", "A mug sits on the table near the window."),
    ("kitchen", "A cat walks across the table."),
    ("street", "A man waves at a passing automobile."),
    ("street", "A woman and her dog wait for a bus."),
]

report = chair_score(captions, annotations)

print("image     mentions                          hallucinated")
for entry in report["per_image"]:
    mentioned = ", ".join(entry["mentioned"]) or "(none)"
    bad = ", ".join(entry["hallucinated"]) or "-"
    print(f"{entry['id']:9s} {mentioned:33s} {bad}")

print()
print(f"captions {report['num_captions']}, mentions {report['num_mentions']}, "
      f"hallucinated {report['num_hallucinated']}")
print(f"CHAIR_I (instance rate) = {report['chair_i']:.4f}")
print(f"CHAIR_S (sentence rate) = {report['chair_s']:.4f}")

# A caption with no recognized objects is clean for the sentence rate and
# simply absent from the instance denominator.
quiet = chair_score([("street", "Nothing much happening here.")], annotations)
print(f"\nmention-free caption: chair_i={quiet['chair_i']}, chair_s={quiet['chair_s']}")
