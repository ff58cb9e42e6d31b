"""Text classification under label noise: beta-mixture sample weighting and a noise-model head."""
