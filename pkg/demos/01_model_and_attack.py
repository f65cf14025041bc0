"""Build a grouped classifier, attack a batch, and inspect the constraint.

The model returns logits plus one activation tensor per convolutional group;
the PGD attack perturbs every pixel by at most epsilon while staying inside
the valid pixel range.
"""

import numpy as np

from atpair import AttackConfig, build_model, load_dataset, pgd_attack

model = build_model("smallcnn4", num_classes=2, seed=0)
dataset = load_dataset("blobs2", "test")
batch = next(dataset.batches(16))

result = model.forward(batch)
print("logits:", result.logits.shape)
for j, acts in enumerate(result.group_activations):
    print(f"group {j} tap:", acts.shape)

config = AttackConfig(epsilon=0.2, step_size=0.05, num_iterations=10)
adv = pgd_attack(model, batch, config)

delta = np.abs(adv.pixels - batch.pixels)
print(f"\nmax |perturbation| = {delta.max():.6f} (epsilon = {config.epsilon})")
print(f"adversarial pixel range: [{adv.pixels.min():.3f}, {adv.pixels.max():.3f}]")

clean_acc = (model.forward(batch).logits.argmax(1) == batch.labels).mean()
adv_acc = (model.forward(adv).logits.argmax(1) == adv.labels).mean()
print(f"untrained model accuracy: clean {clean_acc:.2f} -> attacked {adv_acc:.2f}")
