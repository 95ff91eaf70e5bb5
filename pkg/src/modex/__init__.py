"""modex: mode-expert cross-attention for clinical trial outcome prediction.

Library layout:
    autodiff   reverse-mode engine every other module builds on
    data       dataset file format, padding/masking, splits, synthesis
    encoders   per-mode transformer encoder stacks
    experts    token selection and directed cross-mode attention
    losses     Cauchy sparsity, cross-mode contrastive, weighted BCE
    fusion     interaction fusion and the prediction head
    model      parameter container and full forward pass
    training   Adam, fit/grid-search, checkpoints
    metrics    F1 / ROC-AUC / PR-AUC and bootstrap evaluation
    cli        batch command-line interface
"""

__version__ = "0.1.0"
