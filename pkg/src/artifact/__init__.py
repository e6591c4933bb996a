"""Onsager–Machlup action functionals for SDEs driven by fractional Brownian motion."""
