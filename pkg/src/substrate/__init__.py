"""Differentiable op set and finite-difference gradient checking."""
