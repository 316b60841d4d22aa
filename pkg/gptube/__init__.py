"""
Paquete gptube: tubos de probabilidad certificados para predicción multi-paso con GPs.
"""
__all__ = ["core", "systems", "utils"]
