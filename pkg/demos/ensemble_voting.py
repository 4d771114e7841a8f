"""Pick one caption per video from several models by consensus, then fuse
a short-video model with a long-video model by frame count."""

from intentvc.ensemble import CandidatePool, fuse_by_length, similarity, vote_with_audit

pool = CandidatePool("dog-1", [
    ("model_a", "a dog runs across the grass"),
    ("model_b", "the dog runs on the grass"),
    ("model_c", "a red car parked outside"),
])
(winner_id, caption), audit = vote_with_audit(pool)
print("pairwise similarity:")
for row in audit.matrix:
    print("  ", " ".join(f"{v:.3f}" for v in row))
print("consensus scores:", [round(float(s), 3) for s in audit.averages])
print("winner:", winner_id, "->", caption)

print("similarity('a red car', 'the red car') =", round(similarity("a red car", "the red car"), 4))

short_model = {"v1": "short-model caption", "v2": "short-model caption"}
long_model = {"v1": "long-model caption", "v2": "long-model caption"}
print(fuse_by_length(short_model, long_model, {"v1": 73, "v2": 74}))
