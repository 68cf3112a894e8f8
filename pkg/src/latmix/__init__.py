"""Latent mixture regression for clustered data."""
