"""Multi-view longitudinal record imputation via diffusion, plus a
view-rebalanced sequence predictor.

Subpackages/modules:
    corpus     synthetic cohort generation, masking, splits, JSONL persistence
    autodiff   dense-tensor reverse-mode differentiation substrate
    kernels    hot numeric kernels (compiled extension with numpy fallback)
    encoder    visit encoding, mask/history/prototype condition blocks
    diffusion  forward noising, denoiser training, guided sampling, decoding
    predictor  longitudinal per-view encoders with inverse-advantage reweighting
    metrics    task metrics, divergence and gradient-contribution diagnostics
    cli        pipeline driver
"""

__version__ = "0.1.0"
