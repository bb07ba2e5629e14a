"""Expert-ODE-guided counterfactual diffusion for treatment-outcome time
series: mechanistic simulators, a hybrid latent-ODE point predictor, a
conditional denoising diffusion model with inverse-propensity weighting and
mechanistic guidance, evaluation metrics, and a config-driven runner."""

__version__ = "0.1.0"
