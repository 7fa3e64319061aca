"""Greedy training of a small sparse autoencoder stack.

Fits three layers on data that lives in a low-dimensional subspace and
reports reconstruction error and the mean hidden activation of each layer
against the sparsity target.

Run: python3 demos/sparse_stack.py
"""

import numpy as np

from gwas_ssae import autoencoder as ae
from gwas_ssae import neuralnet as nn

rng = np.random.default_rng(0)
basis = np.linalg.qr(rng.normal(size=(20, 4)))[0]
x = rng.normal(size=(600, 4)) @ basis.T

cfg = ae.SparseAeConfig(8, sparsity_target=0.05, sparsity_weight=3.0)
stack = ae.stack_train(x, [8, 6, 4], cfg, standardize=True)

for depth, layer in enumerate(stack.layers, start=1):
    code = ae.encode(stack, x, depth)
    print(f"layer {depth}: {layer.weight.shape[1]:>2} -> {layer.weight.shape[0]:>2} units, "
          f"mean p_hat {layer.mean_activation.mean():.3f} (target {cfg.sparsity_target})")

# The stack's encoders seed the first layers of a classifier before fine-tuning.
net = ae.init_classifier_from_stack(stack, 3, seed=0)
print("classifier layer widths:", [w.shape[0] for w in net.weights])
print("output activation:", net.layers[-1].activation, "| sample score:", float(nn.predict(net, x[:1])[0]))
