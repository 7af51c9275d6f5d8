"""Add a muscle to a trained schema, then split a larger body into control groups.

    python3 demos/growth_and_grouping.py

Part one trains a schema of the antagonist pin, attaches a third flexor,
trains the new input/output slots with everything else frozen, then
fine-tunes all weights at a lower rate.  The old slots keep their accuracy.

Part two groups the shoulder-shaped fixture by hand (targets plus every
joint their muscles touch) and prints the resulting group.
"""

import numpy as np

from myoskel.adaptation import add_muscle
from myoskel.fixtures import SHOULDER_TARGETS, kengoro_shoulder, pin_antagonist
from myoskel.grouping import manual_group
from myoskel.schema import TrainParams, forward_masked, static_schema, train_static
from myoskel.sim import sample_static_dataset


def old_slot_error(net, X, cols):
    return np.mean([np.mean(((forward_masked(net, X, m)[1][:, cols] - X[:, cols]) / net.out_std[cols]) ** 2)
                    for m in net.mask_set])


def main():
    model = pin_antagonist()
    X = sample_static_dataset(model, 2500, np.random.default_rng(0))
    net = train_static(static_schema(1, 2, seed=0), X[:2000], TrainParams()).net
    extended = pin_antagonist(extra_flexor=True)
    Y = sample_static_dataset(extended, 2500, np.random.default_rng(1))
    res = add_muscle(net, model, extended.muscles[2], Y[:2000], TrainParams(epochs=100, lr=5e-2),
                     finetune_epochs=500)
    before = old_slot_error(net, X[2000:], [0, 1, 2, 3, 4])
    after = old_slot_error(res.net, Y[2000:], [0, 1, 2, 4, 5])
    print(f"old-slot error before {before:.5f}, after adding a muscle {after:.5f}")

    shoulder = kengoro_shoulder()
    (joints, muscles), = manual_group(shoulder, SHOULDER_TARGETS).groups
    print(f"shoulder group: {len(joints)} joints, {len(muscles)} muscles")
    print("  joints:", [shoulder.joints[j].name for j in joints])
    print("  muscles:", [shoulder.muscles[i].name for i in muscles])


if __name__ == "__main__":
    main()
