/// Matplotlib script that reads the CSV files written by `simulate`.
pub fn script(scenario: &str) -> String {
    format!(
        r#"# Plots for the `{scenario}` simulation. Run from this directory: python3 plot.py
import csv
import os

import matplotlib.pyplot as plt


def rows(name):
    with open(name) as f:
        return list(csv.DictReader(f))


fig, axes = plt.subplots(1, 3, figsize=(15, 4))

paths = rows("paths.csv")
by_path = {{}}
for r in paths:
    by_path.setdefault(r["path_id"], []).append((float(r["t"]), float(r["x_1"])))
for pts in list(by_path.values())[:20]:
    axes[0].plot([t for t, _ in pts], [x for _, x in pts], lw=0.6)
axes[0].set_title("sample paths, first coordinate")
axes[0].set_xlabel("t")

if os.path.exists("marginals.csv"):
    m = [r for r in rows("marginals.csv") if r["axis"] == "1"]
    mids = [0.5 * (float(r["bin_lo"]) + float(r["bin_hi"])) for r in m]
    width = float(m[0]["bin_hi"]) - float(m[0]["bin_lo"])
    axes[1].bar(mids, [float(r["empirical"]) for r in m], width=width, alpha=0.5, label="empirical")
    axes[1].plot(mids, [float(r["expected"]) for r in m], "k.-", label="invariant")
    axes[1].legend()
axes[1].set_title("marginal of x1 at the horizon")

if os.path.exists("martingale.csv"):
    m = rows("martingale.csv")
    t = [float(r["t"]) for r in m]
    mean = [float(r["mean"]) for r in m]
    se = [float(r["standard_error"]) for r in m]
    axes[2].plot(t, mean, label="mean of M")
    axes[2].fill_between(t, [a - 3 * b for a, b in zip(mean, se)], [a + 3 * b for a, b in zip(mean, se)], alpha=0.3)
    axes[2].axhline(0.0, color="k", lw=0.5)
    axes[2].legend()
axes[2].set_title("martingale mean with 3 SE band")

fig.tight_layout()
fig.savefig("plots.png", dpi=120)
print("wrote plots.png")
"#
    )
}
