"""Configuration, training, evaluation, ablation and plotting."""
