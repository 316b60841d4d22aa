from typing import Dict, Tuple

import numpy as np

from ..core.tail_bound import BoundSchedule
from ..core.validation import ValidationSummary


def evaluate_schedule(schedule: BoundSchedule) -> Dict:
    """
    Devuelve un resumen del tubo: radios inicial/final, p final, pasos
    vacíos o con presupuesto agotado y la tendencia de K_t.
    """
    radii = schedule.radii
    steps = schedule.steps
    trend = "flat"
    if radii.size > 2:
        d = np.diff(radii[1:])
        if np.all(d > 0):
            trend = "widening"
        elif np.all(d <= 0):
            trend = "narrowing"
        else:
            trend = "mixed"
    return {
        "steps":           len(steps),
        "complete":        schedule.complete,
        "k_first":         float(radii[0]) if radii.size else None,
        "k_last":          float(radii[-1]) if radii.size else None,
        "p_last":          float(schedule.probabilities[-1]) if steps else None,
        "vacuous_steps":   [s.t for s in steps if s.vacuous],
        "budget_exceeded": any(s.budget_exceeded for s in steps),
        "trend":           trend,
    }


def evaluate_validation(summaries: Dict[str, ValidationSummary]) -> Tuple[Dict, Dict]:
    """
    Devuelve:
      - dict por experimento con ratio de violación y contención
      - dict global con máximos / medias
    """
    results = {}
    for name, s in summaries.items():
        results[name] = {"violation_ratio": s.violation_ratio,
                         "containment":     s.containment,
                         "min_coverage":    float(min(s.per_step_coverage)),
                         "sound":           s.sound}
    if not results:
        return {}, {}

    ratios = [r["violation_ratio"] for r in results.values()]
    return results, {"max_violation":  max(ratios),
                     "mean_violation": sum(ratios) / len(ratios),
                     "all_sound":      all(r["sound"] for r in results.values())}
