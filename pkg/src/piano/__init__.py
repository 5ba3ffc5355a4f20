"""Dual neural operator nowcasting with an advection-diffusion physics loss."""

__version__ = "0.1.0"
