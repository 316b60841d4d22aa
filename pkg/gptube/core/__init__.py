"""Sub-paquete con la lógica numérica pura: GP, cotas, tubos y validación (sin I/O)."""
