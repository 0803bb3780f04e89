"""Acceptance gate for the figure package: every kind renders from a golden
run directory, the fading figure carries a mean line plus confidence band,
and the divergence figure uses a log y-axis."""

import os
import shutil

from conftest import ACCEPTANCE_LINES

from iflab_plots import render, schemas

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def conclude(criterion, passed, detail):
    line = f"[criterion {criterion:02d}] {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_criterion_11_all_kinds_render(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    for name in ("divergence.csv", "fading.csv", "correction_summary.csv"):
        shutil.copy(os.path.join(GOLDEN, name), run / name)

    rendered = []
    for kind in render.KINDS:
        spec = render.spec_for_run(kind, str(run), str(tmp_path / f"{kind}.png"))
        png, svg = render.render(spec)
        ok = open(png, "rb").read(8) == PNG_MAGIC and open(svg, "rb").read(6).startswith(b"<?xml")
        rendered.append((kind, ok))

    fading_fig = render.draw_fading(schemas.load_fading(str(run / "fading.csv")))
    fading_ax = fading_fig.axes[0]
    has_mean_lines = len(fading_ax.get_lines()) >= 2  # one mean line per method
    has_band = len(fading_ax.collections) >= 1  # the shaded confidence region

    div_fig = render.draw_divergence(schemas.load_divergence(str(run / "divergence.csv")))
    log_y = div_fig.axes[0].get_yscale() == "log"

    all_ok = all(ok for _, ok in rendered) and has_mean_lines and has_band and log_y
    conclude(
        11, all_ok,
        f"kinds={','.join(k for k, ok in rendered if ok)} "
        f"fading mean+band={has_mean_lines and has_band} divergence log-y={log_y}",
    )
