"""Style-modulated GAN with an information-maximizing latent code, exact lemma checks,
generative metrics and embedding-based anomaly detection, all on numpy."""

__version__ = "0.1.0"
