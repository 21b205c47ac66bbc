"""Group basis pursuit: solvers, stability certificates and adversarial tooling."""
__version__ = "0.1.0"
