"""Adversarially train a defended model and compare it to a plain one.

Abbreviated budget so the script finishes in two to three minutes on a
laptop; scale epochs back up to 12 for the numbers the test suite checks.
"""

import dataclasses

from atpair import (
    AttackConfig,
    PairingConfig,
    ThreatModel,
    TrainConfig,
    build_model,
    clean_accuracy,
    evaluate_robustness,
    load_dataset,
    train,
)
from atpair.trainer import variant_config

train_set = load_dataset("blobs2", "train")
test_set = load_dataset("blobs2", "test").subset(100)

base = TrainConfig(
    epochs=6,
    batch_size=100,
    learning_rate=0.02,
    train_attack=AttackConfig(epsilon=0.2, step_size=0.05, num_iterations=10, random_start=True),
    pairing=PairingConfig(alpha=0.5, beta=2.0),
    seed=0,
)

for variant in ("plain", "at_alp"):
    model = build_model("smallcnn4", 2, seed=0)
    _, log = train(model, train_set, variant_config(base, variant))
    report = evaluate_robustness(
        model, ThreatModel("gray_box"), test_set, epsilons=[0.2], iteration_counts=[40], step_size=0.0125
    )
    print(
        f"{variant}: clean={clean_accuracy(model, test_set):.3f} "
        f"robust@(eps=0.2, 40 it)={report.rows[0]['top1']:.3f} "
        f"(final train total={log.rows[-1]['total']:.3f})"
    )
