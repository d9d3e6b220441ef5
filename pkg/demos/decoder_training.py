"""Anchor-conditioned trajectory decoding at desk scale.

A three-maneuver task is clustered into trajectory anchors; the decoder
learns to pick the right anchor from the scene feature and to regress the
residual offsets.  Evaluation is on held-out samples.
"""

import numpy as np

from knowspace.cli import feature_rows
from knowspace.decoder import decode, init_decoder, train_decoder
from knowspace.engine import InferenceConfig
from knowspace.scenarios import TaskSpec, default_archetypes, generate_task
from knowspace.spaces import extract_anchors, make_space, update_space

archs = default_archetypes(feature_dim=16)[:3]
spec = TaskSpec(1, tuple((a, 40) for a in archs), seed=17)
trajs, feats, labels = generate_task(spec)

rng = np.random.default_rng(101)
perm = rng.permutation(len(labels))
train_idx, test_idx = perm[30:], perm[:30]

tks = make_space("trajectory", 20)
tks, _ = update_space(tks, [("train", trajs[train_idx])],
                      InferenceConfig(passes=6, birth_pool_min=5,
                                      birth_loglik_percentile=50.0),
                      task_id=1)
anchors = extract_anchors(tks).anchors
print(f"trajectory anchors discovered: {anchors.shape[0]}")

params = init_decoder(16, seed=0, tau=1.0, n_speed_classes=3)
dataset = [(feature_rows(feats[i]), trajs[i], int(labels[i]))
           for i in train_idx[:60]]
params, trace = train_decoder(dataset, anchors, params, steps=300,
                              learning_rate=0.05)
print(f"training loss: {trace[0].total:.3f} -> {trace[-1].total:.3f}")

correct, ades = 0, []
for i in test_idx:
    out = decode(anchors, feature_rows(feats[i]), params)
    true_k = int(np.argmin(np.linalg.norm(anchors - trajs[i], axis=1)))
    correct += int(np.argmax(out.probs)) == true_k
    ades.append(np.linalg.norm(out.selected.reshape(10, 2)
                               - trajs[i].reshape(10, 2), axis=1).mean())
print(f"held-out selection accuracy: {correct / len(test_idx):.0%}")
print(f"held-out ADE: {np.mean(ades):.3f} m")
