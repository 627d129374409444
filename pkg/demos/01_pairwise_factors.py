"""A walking tour of the pairwise machinery: energies, the normalization
ratio, robust factors, and posterior log-odds.

Every quantity the models learn against is built from one Gaussian pairwise
factor with a per-edge on/off switch. This script prints the numbers for a
single edge so you can see how the pieces fit:

    python3 demos/01_pairwise_factors.py
"""

import numpy as np

from predseg import mrf

rng = np.random.default_rng(0)

# Two feature vectors for the endpoints of one edge, k = 3 channels, and a
# per-channel coupling strength c (precision of the attraction).
f_i = np.array([0.5, -0.2, 1.1])
f_j = np.array([0.4, -0.1, 0.9])
c = np.array([2.0, 0.5, 1.0])

print("== the attraction energy ==")
energy = mrf.log_pair_energy(f_i, f_j, c)
print(f"log psi(f_i, f_j) = -sum_l c_l/2 (f_i - f_j)_l^2 = {energy:+.4f}")
print("identical features give 0; it only ever penalizes:",
      f"{mrf.log_pair_energy(f_i, f_i, c):+.4f}")
print()

# The switch prior p would drift during learning if turning an edge on were
# free energy: E[exp(energy)] < 1 under the feature prior. The normalization
# ratio r(c) is exactly the correction that makes "on" cost-neutral a priori.
print("== the normalization ratio ==")
r = mrf.log_znorm_ratio(c)
print(f"r(c) = -log E[exp(log psi)] = {r:.4f}  (grows with c)")
for scale in (0.1, 1.0, 10.0):
    print(f"   c scaled by {scale:>4}: r = {mrf.log_znorm_ratio(c * scale):.4f}")
print()

# With the correction in place, marginalizing the features recovers the
# prior exactly; check p(w=1) by Monte Carlo under the standard normal.
print("== prior calibration (Monte Carlo check) ==")
p = 0.3
samples = rng.standard_normal((200_000, 2, c.size))
on_weight = p * np.exp(r + mrf.log_pair_energy(samples[:, 0], samples[:, 1], c))
marginal = (on_weight / (on_weight + (1 - p))).mean()
print(f"p = {p}, Monte Carlo marginal p(w=1) = {marginal:.4f}")
print()

# The robust factor is the switch-marginalized potential: p*psi~ + (1-p).
# It is bounded below by (1-p), which is what makes the model outlier-proof:
# a huge feature difference costs log(1-p), not a quadratic.
print("== robust factor ==")
for dist in (0.0, 1.0, 3.0, 10.0):
    val = mrf.log_robust_factor(f_i, f_i + dist, c, p)
    print(f"  |f_i - f_j| = {dist:>4}: log factor = {val:+.4f}"
          + ("   <- floor log(1-p) = %.4f" % np.log(1 - p) if dist == 10.0 else ""))
print()

# Finally the quantity the segmenter consumes: the posterior log-odds of the
# switch given the features. Prior odds plus the calibrated evidence.
print("== posterior log-odds ==")
print(f"{'pair':<24}{'logodds':>10}")
for name, a, b in [
    ("identical features", f_i, f_i),
    ("nearby features", f_i, f_j),
    ("distant features", f_i, f_i + 3.0),
]:
    print(f"{name:<24}{mrf.posterior_logodds(a, b, c, p):>+10.4f}")
print()
print("Positive means 'probably connected'; the sign flip with distance is")
print("the whole segmentation signal.")
