"""CSV reports and their companion figures.

Benchmarks emit delimited data first; each CSV gets a rendered PNG next to
it (same stem) unless plotting is disabled.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

BENCH_HEADER = ["workload", "ops", "threads", "seed", "elapsed_s",
                "throughput_ops_s", "p50_us", "p99_us", "recovery_events",
                "validated"]


def bench_row(result, spec):
    return [result.workload, result.ops, spec.threads, spec.seed,
            f"{result.elapsed:.6f}", f"{result.throughput:.1f}",
            f"{result.percentile(50) * 1e6:.1f}",
            f"{result.percentile(99) * 1e6:.1f}",
            result.recovery_events, int(result.validated)]


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def render_bench_figure(csv_path, results):
    names = [r.workload for r in results]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.bar(range(len(results)), [r.throughput for r in results],
            color="#4878a8")
    ax1.set_xticks(range(len(results)))
    ax1.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax1.set_ylabel("ops/s")
    ax1.set_title("throughput")
    ax2.bar(range(len(results)),
            [r.percentile(50) * 1e6 for r in results], color="#4878a8",
            label="p50")
    ax2.bar(range(len(results)),
            [(r.percentile(99) - r.percentile(50)) * 1e6 for r in results],
            bottom=[r.percentile(50) * 1e6 for r in results],
            color="#c44e52", label="p99")
    ax2.set_xticks(range(len(results)))
    ax2.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax2.set_ylabel("latency (us)")
    ax2.set_title("op latency")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    out = figure_path(csv_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def linear_fit(xs, ys):
    """Least-squares line plus R^2."""
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx if sxx else 0.0
    intercept = my - slope * mx
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    return slope, intercept, r2


def render_scaling_figure(csv_path, xs, ys, xlabel, ylabel, title):
    slope, intercept, r2 = linear_fit(xs, ys)
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    ax.plot(xs, ys, "o", color="#4878a8", label="measured")
    ax.plot(xs, [slope * x + intercept for x in xs], "-", color="#c44e52",
            label=f"fit (R$^2$={r2:.3f})")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = figure_path(csv_path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
