"""Case-control genotype classification with stacked sparse autoencoders.

Modules cover PLINK binary I/O, quality control, single-SNP logistic
association, a small feedforward network, sparse autoencoder stacks,
classification metrics, a genotype simulator and an end-to-end pipeline.
"""

__version__ = "0.1.0"
