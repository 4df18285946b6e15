"""Run artifacts: rasters, VTK, designs, histories and run metadata."""

from __future__ import annotations

import csv
import json
import os
import platform
from pathlib import Path

import numpy as np

from .grid import Domain, build_grid
from .problem import ProblemSpec, to_jsonable

OUTPUT_ROOT_ENV = "PIGP_OUTPUT_ROOT"

# void, material 1, material 2, material 3 (stiffest) and extras
PHASE_COLORS = np.array(
    [[255, 255, 255], [30, 90, 200], [40, 170, 60], [210, 30, 30], [230, 160, 20], [120, 60, 160]], dtype=np.uint8
)
BACKGROUND = np.array([128, 128, 128], dtype=np.uint8)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "pigp-runs"))


def ensure_writable(dest: Path) -> Path:
    dest = Path(dest)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        probe = dest / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"cannot write to {dest}: {exc.strerror or exc}") from exc
    return dest


# ---------------------------------------------------------------- rasters


def cell_image(grid, values: np.ndarray, fill=0):
    """Scatter per-element values onto the (rows, cols) cell raster, top row = max y.

    3D grids are cut through the middle layer of elements.
    """
    ijk = grid.element_ijk()
    shape = grid.element_shape()
    values = np.asarray(values)
    if grid.dims == 3:
        mid = shape[2] // 2
        keep = ijk[:, 2] == mid
        ijk, values = ijk[keep], values[keep]
    img = np.empty((shape[1], shape[0]) + values.shape[1:], dtype=values.dtype)
    img[...] = fill
    img[shape[1] - 1 - ijk[:, 1], ijk[:, 0]] = values
    return img


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit grayscale; ``img`` in [0, 1] with 1 drawn black (solid)."""
    data = np.round(255 * (1.0 - np.clip(img, 0.0, 1.0))).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, _, body = raw.split(maxsplit=4)
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body, dtype=np.uint8)[: w * h * ch]
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


def write_design_rasters(dest: Path, design) -> list[Path]:
    """One grayscale raster per phase plus an indexed-color combined raster."""
    out = []
    for i in range(design.rho.shape[1]):
        p = dest / f"rho_phase{i}.pgm"
        write_pgm(p, cell_image(design.grid, design.rho[:, i]))
        out.append(p)
    colors = PHASE_COLORS[design.phases % len(PHASE_COLORS)]
    rgb = cell_image(design.grid, colors, fill=BACKGROUND)
    p = dest / "design.ppm"
    write_ppm(p, rgb)
    out.append(p)
    return out


# ---------------------------------------------------------------- VTK


def write_vtk(path, grid, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "pigp") -> None:
    """Legacy ASCII unstructured grid (quads or hexahedra; handles masked domains)."""
    nodes = grid.nodes
    if grid.dims == 2:
        nodes = np.column_stack([nodes, np.zeros(len(nodes))])
    cell_type = 9 if grid.dims == 2 else 12
    n_s = grid.elements.shape[1]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(nodes)} double"]
    lines += [" ".join("%.17g" % c for c in row) for row in nodes]
    lines.append(f"CELLS {grid.n_elements} {grid.n_elements * (n_s + 1)}")
    lines += [f"{n_s} " + " ".join(map(str, e)) for e in grid.elements]
    lines.append(f"CELL_TYPES {grid.n_elements}")
    lines += [str(cell_type)] * grid.n_elements

    def block(data: dict, n: int, header: str):
        if not data:
            return []
        out = [f"{header} {n}"]
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += ["%.17g" % v for v in arr]
            elif arr.shape[1] in (2, 3) and header == "POINT_DATA" and name in ("u", "v"):
                vec = np.column_stack([arr, np.zeros(len(arr))]) if arr.shape[1] == 2 else arr
                out.append(f"VECTORS {name} double")
                out += [" ".join("%.17g" % c for c in row) for row in vec]
            else:
                for j in range(arr.shape[1]):
                    out += [f"SCALARS {name}_{j} double 1", "LOOKUP_TABLE default"]
                    out += ["%.17g" % v for v in arr[:, j]]
        return out

    lines += block(cell_data or {}, grid.n_elements, "CELL_DATA")
    lines += block(point_data or {}, grid.n_nodes, "POINT_DATA")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- designs


def save_design(path, design, spec: ProblemSpec | None = None) -> None:
    g = design.grid
    np.savez(path, rho=design.rho, phases=design.phases, shape=np.asarray(g.shape),
             lengths=np.asarray(g.domain.lengths, dtype=float), mask=np.asarray(g.domain.mask),
             problem=np.asarray(spec.name if spec else ""))


def load_design(path):
    """Returns (grid, phases, rho) rebuilt from a saved design file."""
    data = np.load(path)
    domain = Domain(tuple(data["lengths"].tolist()), str(data["mask"]))
    grid = build_grid(domain, tuple(int(n) for n in data["shape"]))
    phases = data["phases"].astype(int)
    if len(phases) != grid.n_elements:
        raise ValueError(f"design holds {len(phases)} cells but the rebuilt grid has {grid.n_elements}")
    return grid, phases, data["rho"]


# ---------------------------------------------------------------- history and metadata


def read_history(path) -> tuple[str, list[dict]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema:"):
            raise ValueError(f"{path}: missing schema line")
        schema = first.split(":", 1)[1].strip()
        rows = list(csv.DictReader(fh))
    return schema, rows


def versions() -> dict:
    import scipy
    import torch

    from . import __version__

    return {"pigp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def decision_values(spec: ProblemSpec) -> dict:
    """Every gap-filling choice that shapes a run, for mechanical audits."""
    tr, nw = spec.train, spec.network
    return {
        "penalization": {"start": tr["penal_start"], "end": tr["penal_end"], "ramp_fraction": tr["penal_ramp"]},
        "alpha_u": spec.alpha_u,
        "alpha_T": spec.alpha_T,
        "gp": dict(spec.gp),
        "gp_conditioning": "per-grid boundary nodes, uniformly thinned to the cap",
        "decoder_gating": "h = (1 - z) * tanh(W h) + z * f2, z = sigmoid(G h)",
        "encoder": {"n_rep": nw["n_rep"], "n_f": nw["n_f"], "res": nw["res"], "offsets": "k / (n_rep + 1)"},
        "curriculum": {"gamma": tr["gamma"], "psi_start": tr["psi_start"] or "coarse-grid initial fraction"},
        "lr": {"lr0": tr["lr"], "factor": tr["lr_factor"], "stages": tr["lr_stages"]},
        "loss_weights": {k: tr[k] for k in ("omega_m", "omega_t", "omega_v", "omega_p")},
        "normalize_constraints": tr["normalize_constraints"],
        "objective_scale": tr["objective_scale"],
        "energy_design_gradient": tr["energy_design_gradient"],
        "adjoint_spring_uses_primary": tr["adjoint_spring_uses_primary"],
        "quadrature": tr["quadrature"],
        "isothermal": tr["isothermal"],
        "gray_thresholds": [0.1, 0.9],
        "source_interpolated": spec.physics["source_interpolated"],
        "plane": spec.physics["plane"],
    }


def write_run_json(path, spec: ProblemSpec, seed: int, threads: int, extra: dict | None = None) -> None:
    meta = {
        "problem": spec.name,
        "objective": spec.objective,
        "config_hash": spec.config_hash(),
        "seed": seed,
        "threads": threads,
        "config": spec.raw,
        "resolved": {"train": spec.train, "network": spec.network, "gp": spec.gp, "physics": spec.physics,
                     "constraints": spec.constraints, "grid": spec.grid},
        "decisions": decision_values(spec),
        "versions": versions(),
    }
    meta.update(extra or {})
    Path(path).write_text(json.dumps(to_jsonable(meta), indent=2, sort_keys=True, default=str) + "\n")


def emit_outputs(dest, spec: ProblemSpec, trainer, result, seed: int, threads: int, vtk: bool = True) -> dict:
    """Rasters, design file, optional VTK and run.json next to the streamed history.csv."""
    dest = ensure_writable(dest)
    files = {"history": dest / "history.csv"}
    extra = {"epochs": len(result.history), "elapsed_s": round(result.elapsed, 3)}
    design = result.design
    if design is not None:
        files["rasters"] = write_design_rasters(dest, design)
        save_design(dest / "design.npz", design, spec)
        files["design"] = dest / "design.npz"
        extra["gray_fraction"] = design.gray.tolist()
        extra["gray_total"] = design.gray_total
        if result.history:
            last = result.history[-1]
            extra["final"] = {k: last.get(k) for k in ("M", "P", "C_M", "C_P", "objective", "total")}
        if vtk:
            state = trainer.state(design.grid.index)
            point = {k: v for k, v in state.items()}
            write_vtk(dest / "fields.vtk", design.grid, point, {"rho": design.rho, "phase": design.phases})
            files["vtk"] = dest / "fields.vtk"
    write_run_json(dest / "run.json", spec, seed, threads, extra)
    files["run"] = dest / "run.json"
    return files
