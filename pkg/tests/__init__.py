"""
Tests de gptube: `python tests/run_tests.py` (rápidos) o `--slow` (benchmarks).
"""
