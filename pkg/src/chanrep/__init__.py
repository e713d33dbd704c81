"""Channel representation learning, latent generation and geolocation-based precoding."""

__version__ = "0.1.0"
