"""Composed image retrieval via latent target-content prediction.

The package trains a small world-model predictor over frozen dual-encoder
features: image-caption pairs become <cropped source view, caption action,
original target view> triplets, the predictor imagines the target patches
missing from the source, and a tanh-gated fusion maps everything into a
pseudo-word token that slots into text prompts for zero-shot composed
retrieval.

Module map:

    autodiff    reverse-mode tensor engine (numpy-backed)
    gradcheck   finite-difference gradient verification
    views       world-view generation: crops, mask blocks, synthetic data
    encoders    frozen dual-encoder gateway (toy pair + adapter contract)
    predictor   latent target-content predictor (narrow transformer)
    alignment   gated pseudo-token fusion + symmetric contrastive loss
    config      flat run configuration
    training    AdamW loop, warmup, checkpoints, metric logs
    retrieval   prompt templates, query composition, ranking, Recall/mAP
    verify      self-verification suites (also behind `latentcir verify`)
    cli         command-line entry point
"""

__version__ = "0.1.0"
