"""
Detection and vulnerability metrics
===================================

APCER/BPCER at fixed operating points, the ROC curve, and the morph
vulnerability rate (MMPMR) of a face recognizer at fixed false match rates.
"""

# %%
import numpy as np

from morphmad import metrics
from morphmad.metrics import ScoreTable, VulnTable

rng = np.random.default_rng(0)
attacks = rng.normal(0.7, 0.12, 300).clip(0, 1)
bona_fide = rng.normal(0.35, 0.12, 400).clip(0, 1)
scores = ScoreTable.from_arrays(attacks, bona_fide)

# %%
# A score at or above the threshold is called an attack. The operating point
# picks the threshold that keeps APCER at or below the target with the lowest BPCER.
for target in metrics.APCER_TARGETS:
    op = metrics.bpcer_at_apcer(scores, target)
    print(f"APCER<={target:<6} tau={op.tau:.3f} BPCER={op.bpcer:.3f} saturated={op.saturated}")

# %%
pts = metrics.roc(scores)
print(f"{len(pts)} ROC points, AUC={metrics.roc_auc(pts):.3f}")

# %%
# In-domain versus cross-domain BPCER at APCER=10%, in percentage points.
in_domain = metrics.EvalReport.from_scores(scores, "Train-D Test-D")
shifted = ScoreTable.from_arrays(attacks - 0.1, bona_fide)
cross = metrics.EvalReport.from_scores(shifted, "Train-D Test-PS")
print("BPCER increase (pp):", metrics.generalization_report(in_domain, cross))

# %%
# Vulnerability: a morph counts as a match at tau only if it matches both
# contributing subjects. The threshold comes from non-mated comparisons.
n = 200
vuln = VulnTable(
    [f"m{i}" for i in range(n)],
    rng.beta(5, 2, n),
    rng.beta(5, 2, n),
    rng.beta(2, 5, 5000),
)
for fmr, row in metrics.vulnerability_report(vuln).items():
    print(f"FMR={fmr}: threshold={row['threshold']:.3f} MMPMR={row['mmpmr']:.3f}")
