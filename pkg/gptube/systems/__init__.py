"""Sub-paquete con los sistemas de referencia y sus presets."""
