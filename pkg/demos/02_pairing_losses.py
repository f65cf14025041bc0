"""The loss stack on a clean/adversarial pair, term by term.

Attention maps collapse each activation tensor's channels into a spatial
saliency map; the attention term measures how far the normalized maps of the
two branches drift apart, the logit term does the same at the output.
"""

import numpy as np

from atpair import (
    AttackConfig,
    PairingConfig,
    attention_map,
    build_model,
    combined_loss,
    load_dataset,
    pgd_attack,
)

model = build_model("smallcnn4", num_classes=2, seed=1)
batch = next(load_dataset("blobs2", "test").batches(8))
adv = pgd_attack(model, batch, AttackConfig(epsilon=0.2, step_size=0.05, num_iterations=10))

maps = attention_map(model.forward(batch).group_activations[0], power=2)
print("group-0 attention map:", maps.shape, f"mass inside [{maps.min():.3f}, {maps.max():.3f}]")

config = PairingConfig(alpha=0.5, beta=2.0)
out = combined_loss(model, batch, adv, config)
print(f"\nce  = {out.ce:.4f}")
print(f"alp = {out.alp:.4f}   (x alpha {config.alpha})")
print(f"at  = {out.at:.4f}   (x beta {config.beta})")
print(f"total = {out.total:.4f}")

identical = combined_loss(model, batch, batch, config)
print(f"\nidentical pair: alp = {identical.alp}, at = {identical.at} (both vanish)")
