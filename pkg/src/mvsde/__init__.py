"""Monte Carlo engine for McKean-Vlasov SDEs with singular interaction kernels."""

__version__ = "0.1.0"
