"""Score a handful of candidate captions with BLEU@4, ROUGE-L, CIDEr and
METEOR-lite, reported on the usual 0-100 scale."""

from intentvc.metrics import meteor_alignment, score_all, tokenize

refs = {
    "bird-3": ["a small bird sits on a branch", "the bird rests on the branch"],
    "car-7": ["the red car drives down the road", "a car moves along the street"],
    "dog-1": ["the dog runs across the grass", "a brown dog runs on the lawn"],
}
cands = {
    "bird-3": "a small bird sitting on the branch",
    "car-7": "the red car drives on a road",
    "dog-1": "a dog runs across the green grass",
}

report = score_all(cands, refs)
for name, value in report.percentages().items():
    print(f"{name:8s} {value:6.2f}")

# METEOR-lite aligns exact tokens first, then Porter stems.
cand = tokenize(cands["bird-3"]).tokens
ref = tokenize(refs["bird-3"][0]).tokens
alignment, chunks = meteor_alignment(cand, ref)
print("alignment:", [(cand[i], ref[j]) for i, j in sorted(alignment.items())], "chunks:", chunks)
