"""Output files: metadata headers, atomic writes, draw tables and small SVG plots."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .draws import PosteriorDraws

TOOL = f"bnpmeta {__version__}"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def metadata(config_hash_: str, seed, dataset_hash: str | None, **extra) -> dict:
    meta = {"tool": TOOL, "config_hash": config_hash_, "seed": seed, "dataset_hash": dataset_hash}
    meta.update(extra)
    return meta


def header_lines(meta: dict, prefix: str = "# ") -> str:
    out = []
    for k, v in meta.items():
        text = v if isinstance(v, str) else json.dumps(v, sort_keys=True, default=str)
        out.append(f"{prefix}{k}: {text}")
    return "\n".join(out) + "\n"


def read_header(text: str) -> dict:
    """Parse the ``# key: value`` lines at the top of a delimited artifact."""
    meta = {}
    for line in text.splitlines():
        if not line.startswith("# "):
            break
        key, _, value = line[2:].partition(": ")
        try:
            meta[key] = json.loads(value)
        except json.JSONDecodeError:
            meta[key] = value
    return meta


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write the whole file to a temporary sibling, then rename over ``path``."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, meta: dict, body: dict) -> None:
    write_atomic(path, json.dumps({"metadata": meta, **body}, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def table_text(meta: dict, header: list, rows) -> str:
    buf = io.StringIO()
    buf.write(header_lines(meta))
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# --- draw tables -------------------------------------------------------------

def draw_columns(draws: PosteriorDraws, covariate_names) -> list:
    names = ["(intercept)", *covariate_names]
    coef = [names[c] for c in draws.columns]
    cols = [f"beta[{c}]" for c in coef]
    cols += [f"gamma[{c}]" for c in coef[1:][: draws.params["gamma"].shape[1]]]
    if draws.kind == "BNP":
        cols += ["phi", "sigma0_sq"]
        cols += [f"beta_omega[{c}]" for c in coef]
        cols += ["sigma_omega", "n_occupied", "intercepts"]
    else:
        cols += ["sigma0_sq", "sigma00_sq", "psi"]
    return cols


def draws_to_text(draws: PosteriorDraws, meta: dict, covariate_names) -> str:
    """One row per retained draw; BNP intercepts as ``j:mu|j:mu``."""
    p = draws.params
    blocks = [p["beta"], p["gamma"].astype(float)]
    if draws.kind == "BNP":
        blocks += [p["phi"][:, None], p["sigma0_sq"][:, None], p["beta_omega"], p["sigma_omega"][:, None]]
    else:
        blocks += [p["sigma0_sq"][:, None], p["sigma00_sq"][:, None], p["psi"][:, None]]
    gcount = p["gamma"].shape[1]
    q = p["beta"].shape[1]
    buf = io.StringIO()
    buf.write(header_lines(meta))
    buf.write(",".join(draw_columns(draws, covariate_names)) + "\n")
    mat = np.hstack(blocks).tolist()
    for t, row in enumerate(mat):
        cells = [repr(v) for v in row]
        for k in range(q, q + gcount):
            cells[k] = str(int(row[k]))
        if draws.kind == "BNP":
            js, mu = draws.intercepts(t)
            cells.append(str(int(p["n_occupied"][t])))
            cells.append("|".join(f"{j}:{m!r}" for j, m in zip(js.tolist(), mu.tolist())))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def draws_from_text(text: str) -> tuple[PosteriorDraws, dict]:
    """Rebuild :class:`PosteriorDraws` from :func:`draws_to_text` output."""
    meta = read_header(text)
    run = meta["run"]
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    col = {h: k for k, h in enumerate(header)}
    kind = run["model"]

    def block(prefix):
        idx = [k for h, k in col.items() if h.startswith(prefix + "[")]
        idx.sort()
        return np.array([[float(r[k]) for k in idx] for r in rows]).reshape(len(rows), len(idx))

    params = {"beta": block("beta"), "gamma": block("gamma").astype(np.int8)}
    if kind == "BNP":
        for name in ("phi", "sigma0_sq", "sigma_omega"):
            params[name] = np.array([float(r[col[name]]) for r in rows])
        params["beta_omega"] = block("beta_omega")
        params["n_occupied"] = np.array([int(r[col["n_occupied"]]) for r in rows], dtype=np.int32)
        occ_j, occ_mu, ptr = [], [], [0]
        for r in rows:
            cell = r[col["intercepts"]]
            parts = [c.split(":") for c in cell.split("|")] if cell else []
            occ_j += [int(a) for a, _ in parts]
            occ_mu += [float(b) for _, b in parts]
            ptr.append(len(occ_j))
        params["occ_ptr"] = np.array(ptr, dtype=np.int64)
        params["occ_j"] = np.array(occ_j, dtype=np.int64)
        params["occ_mu"] = np.array(occ_mu, dtype=float)
    else:
        for name in ("sigma0_sq", "sigma00_sq", "psi"):
            params[name] = np.array([float(r[col[name]]) for r in rows])
    draws = PosteriorDraws(kind=kind, params=params, meta=run, columns=tuple(run["columns"]))
    return draws, meta


# --- SVG -------------------------------------------------------------------------

def svg_lines(series, meta: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              width: int = 640, height: int = 400) -> str:
    """Minimal line plot; ``series`` is a list of ``(x, y, label)``."""
    pad = 50
    xs = np.concatenate([np.asarray(s[0], float) for s in series])
    ys = np.concatenate([np.asarray(s[1], float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(0.0, float(ys.min())), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = ["<!--", escape(header_lines(meta, prefix="").replace("--", "- -")).rstrip(), "-->"]
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">')
    out.append(f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
               'fill="none" stroke="black"/>')
    for k, (x, y, label) in enumerate(series):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float)))
        color = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 150}" y="{pad + 15 + 15 * k}" fill="{color}" '
                   f'font-size="12">{escape(str(label))}</text>')
    out.append(f'<text x="{width / 2}" y="{pad - 15}" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">'
               f'{escape(ylabel)}</text>')
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{sx(v):.1f}" y="{height - pad + 15}" text-anchor="{anchor}" font-size="10">{v:.3g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{pad - 5}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
