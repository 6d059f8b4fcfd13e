"""Locally adaptive activation functions, physics-informed training and a gradient-dynamics lab."""
