"""Helpers de plantillas, IO y evaluación."""
