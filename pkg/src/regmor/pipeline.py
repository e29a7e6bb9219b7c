"""Two-fidelity offline/online orchestration.

The offline stage runs five steps: coarse snapshots on the geometric map,
sensor smoothing, fine-mesh generation from the centroid coarse solution,
greedy registration on the fine mesh, and ROM construction (POD over the
training grid or weak-greedy sampling). Every stage persists its artifacts
under a run directory and is gated by content checksums, so a resumed run
never recomputes a stage whose inputs and outputs are intact.

All artifact writes are atomic; the ROM bundle carries no volatile data
(timestamps live in the run-level log only), so repeated runs with one
seed reproduce it bitwise.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import io as rio
from .euler import (
    EulerOperator,
    GasModel,
    SolverConfig,
    primitives,
    solve_steady,
)
from .geometry import (
    PARAM_BOUNDS,
    PARAM_CENTROID,
    ParameterVector,
    bump_channel_curves,
    gordon_hall,
    invert_gordon_hall,
)
from .mesh import ElementGeometry, bijectivity_check
from .meshgen import channel_mesh, graded_channel_mesh, size_function, uniform_refine
from .registration import (
    ParametricMapModel,
    RegistrationConfig,
    greedy_registration,
)
from .rom import (
    BlockGram,
    EQRule,
    ReducedModel,
    build_eq,
    build_test_rob,
    dual_residual,
    dual_residual_factors,
    evaluate_online,
    pod_fields,
    solve_lspg,
    weak_greedy,
)
from .sensors import build_sensor, mach_at_nodes

__all__ = [
    "PipelineConfig",
    "StageError",
    "run_offline",
    "run_online",
    "load_bundle",
    "train_grid",
    "default_config",
]


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Every knob of the offline/online pipeline, JSON-serializable.

    Defaults follow the reference setup (fine-mesh target size 0.007,
    registration and ROM tolerances as published); desk-scale runs override
    the mesh and grid fields.
    """

    # coarse stage (structured mapped mesh)
    coarse_nx: int = 20
    coarse_ny: int = 8
    coarse_p: int = 2
    coarse_grading: float = 1.2
    # training grid over the parameter box
    train_grid: tuple = (5, 5)
    # fine stage
    h0: float = 0.007
    fine_p: int = 2
    fine_refine: bool = False
    fine_mesh_file: str = ""
    size_frac: float = 0.1
    size_window: int = 5
    size_passes: int = 2
    max_elements: int = 200000
    # registration
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    # ROM
    mode: str = "pod"  # or "greedy"
    variant: str = "lagrangian"  # or "linear"
    n_max: int = 12
    tol_eq: float = 1e-10
    tol_test: float = 1e-3
    n_seed: int = 0
    rbf_threshold: int = 9
    # solver
    gamma: float = 1.4
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["train_grid"] = list(self.train_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "registration" in d and isinstance(d["registration"], dict):
            d["registration"] = RegistrationConfig(**d["registration"])
        if "solver" in d and isinstance(d["solver"], dict):
            d["solver"] = SolverConfig(**d["solver"])
        if "train_grid" in d:
            d["train_grid"] = tuple(d["train_grid"])
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def default_config():
    return PipelineConfig()


def train_grid(cfg):
    """Row-major tensor grid of training parameters over the box."""
    ka, km = cfg.train_grid
    al = np.linspace(*PARAM_BOUNDS[0], ka)
    ma = np.linspace(*PARAM_BOUNDS[1], km)
    return [np.array([a, m]) for a in al for m in ma]


def _mu_tag(mu):
    return f"a{mu[0]:.6f}_m{mu[1]:.6f}"


def _hash_text(text):
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()


class RunDirectory:
    """Filesystem layout plus the checksum-gated stage ledger."""

    def __init__(self, root, cfg=None):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)
        self.manifest_path = os.path.join(self.root, "manifest.json")
        self.manifest = {"stages": {}}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as f:
                self.manifest = json.load(f)
        cfg_path = os.path.join(self.root, "config.json")
        if cfg is not None:
            rio.atomic_write(cfg_path, cfg.dumps())
            self.cfg = cfg
        elif os.path.exists(cfg_path):
            with open(cfg_path) as f:
                self.cfg = PipelineConfig.loads(f.read())
        else:
            raise StageError("init", f"no config.json under {self.root}")
        seed_env = os.environ.get("REGMOR_SEED")
        if seed_env is not None:
            self.cfg = replace(self.cfg, seed=int(seed_env))
        self.cfg_hash = _hash_text(self.cfg.dumps() + f"seed={self.cfg.seed}")

    def path(self, *parts):
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def stage_fresh(self, name, key):
        rec = self.manifest["stages"].get(name)
        if not rec or rec.get("key") != key:
            return False
        for path, sha in rec.get("outputs", {}).items():
            full = os.path.join(self.root, path)
            if not os.path.exists(full) or rio.sha256_file(full) != sha:
                return False
        return True

    def record_stage(self, name, key, outputs, wall_time):
        rel = {
            os.path.relpath(p, self.root): rio.sha256_file(p) for p in outputs
        }
        self.manifest["stages"][name] = {
            "key": key,
            "outputs": rel,
            "wall_time_s": wall_time,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        rio.atomic_write(
            self.manifest_path, json.dumps(self.manifest, indent=2, sort_keys=True)
        )

    def require(self, name):
        if name not in self.manifest["stages"]:
            raise StageError(name, "stage has not been run (missing dependency)")


# ---------------------------------------------------------------------------
# offline stages
# ---------------------------------------------------------------------------

def _coarse_key(run):
    c = run.cfg
    return _hash_text(
        json.dumps(
            [c.coarse_nx, c.coarse_ny, c.coarse_p, c.coarse_grading,
             list(c.train_grid), c.gamma, asdict(c.solver)],
            sort_keys=True,
        )
    )


def coarse_stage(run, log=None):
    """Solve the training grid on the coarse mesh deformed geometrically."""
    key = _coarse_key(run)
    mesh_path = run.path("coarse", "mesh.txt")
    if run.stage_fresh("coarse_snapshots", key):
        return
    cfg = run.cfg
    t0 = time.perf_counter()
    mesh = channel_mesh(
        PARAM_CENTROID[0], cfg.coarse_nx, cfg.coarse_ny, cfg.coarse_p,
        cfg.coarse_grading,
    )
    checksum = rio.write_mesh(mesh_path, mesh)
    ref = invert_gordon_hall(bump_channel_curves(PARAM_CENTROID[0]), mesh.vertices)
    gas = GasModel(cfg.gamma)
    outputs = [mesh_path]
    hist_rows = ["mu1,mu2,step,residual"]
    prev = None
    for mu in train_grid(cfg):
        coords = gordon_hall(bump_channel_curves(mu[0]), ref)
        op = EulerOperator(mesh, coords, gas, cfg.solver)
        U, info = solve_steady(op, mu[1], init=prev)
        prev = U
        fp = run.path("coarse", f"snap_{_mu_tag(mu)}.txt")
        rio.write_field(fp, U.transpose(2, 0, 1).reshape(-1), mu, checksum)
        outputs.append(fp)
        for s, r in enumerate(info["residual_history"]):
            hist_rows.append(f"{mu[0]:.6f},{mu[1]:.6f},{s},{r:.17g}")
        if log:
            log(f"coarse {np.round(mu, 4)}: {info['steps']} steps")
    hp = run.path("coarse", "residual_history.csv")
    rio.atomic_write(hp, "\n".join(hist_rows) + "\n")
    outputs.append(hp)
    run.record_stage("coarse_snapshots", key, outputs, time.perf_counter() - t0)


def sensor_stage(run, log=None):
    run.require("coarse_snapshots")
    cfg = run.cfg
    key = _hash_text(
        _coarse_key(run)
        + json.dumps([cfg.registration.sensor_n, cfg.registration.xi_s])
    )
    if run.stage_fresh("sensors", key):
        return
    t0 = time.perf_counter()
    mesh = rio.read_mesh(run.path("coarse", "mesh.txt"))
    ref = invert_gordon_hall(bump_channel_curves(PARAM_CENTROID[0]), mesh.vertices)
    gas = GasModel(cfg.gamma)
    outputs = []
    for mu in train_grid(cfg):
        vec, _, _ = rio.read_field(run.path("coarse", f"snap_{_mu_tag(mu)}.txt"))
        U = vec.reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
        s = build_sensor(
            ref, mach_at_nodes(mesh, U, gas), cfg.registration.sensor_n,
            cfg.registration.xi_s,
        )
        sp = run.path("sensors", f"sensor_{_mu_tag(mu)}.txt")
        rio.write_grid(sp, s)
        outputs.append(sp)
        if log:
            log(f"sensor {np.round(mu, 4)}")
    run.record_stage("sensors", key, outputs, time.perf_counter() - t0)


def fine_mesh_stage(run, log=None):
    run.require("coarse_snapshots")
    cfg = run.cfg
    key = _hash_text(
        _coarse_key(run)
        + json.dumps(
            [cfg.h0, cfg.fine_p, cfg.fine_refine, cfg.fine_mesh_file,
             cfg.size_frac, cfg.size_window, cfg.size_passes, cfg.seed],
            sort_keys=True,
        )
    )
    if run.stage_fresh("fine_mesh", key):
        return
    t0 = time.perf_counter()
    out = run.path("fine", "mesh.txt")
    if cfg.fine_mesh_file:
        mesh = rio.read_mesh(cfg.fine_mesh_file)
    else:
        cmesh = rio.read_mesh(run.path("coarse", "mesh.txt"))
        mubar = min(train_grid(cfg), key=lambda m: np.linalg.norm(m - PARAM_CENTROID))
        vec, _, _ = rio.read_field(run.path("coarse", f"snap_{_mu_tag(mubar)}.txt"))
        U = vec.reshape(4, cmesh.n_elements, -1).transpose(1, 2, 0)
        geom = ElementGeometry(cmesh)
        _, _, Ma = primitives(U, GasModel(cfg.gamma))
        sf = size_function(
            geom, Ma, h0=cfg.h0, frac=cfg.size_frac,
            window=cfg.size_window, passes=cfg.size_passes,
        )
        mesh = graded_channel_mesh(
            sf, p=cfg.fine_p, seed=cfg.seed, max_elements=cfg.max_elements,
        )
        if cfg.fine_refine:
            mesh = uniform_refine(mesh)
    ok, bad = bijectivity_check(mesh)
    if not ok:
        raise StageError("fine_mesh", f"generated mesh has inverted elements {bad}")
    rio.write_mesh(out, mesh)
    if log:
        log(f"fine mesh: {mesh.n_elements} elements")
    run.record_stage("fine_mesh", key, [out], time.perf_counter() - t0)


def registration_stage(run, log=None):
    run.require("sensors")
    run.require("fine_mesh")
    cfg = run.cfg
    key = _hash_text(
        json.dumps(asdict(cfg.registration), sort_keys=True)
        + run.manifest["stages"]["sensors"]["key"]
        + run.manifest["stages"]["fine_mesh"]["key"]
    )
    if run.stage_fresh("registration", key):
        return
    t0 = time.perf_counter()
    mesh = rio.read_mesh(run.path("fine", "mesh.txt"))
    sensors = [
        (mu, rio.read_grid(run.path("sensors", f"sensor_{_mu_tag(mu)}.txt")))
        for mu in train_grid(cfg)
    ]
    res = greedy_registration(sensors, mesh, cfg.registration, log=log)
    model = ParametricMapModel(res.space, res.mus, res.coeffs, cfg.registration.r_min)
    mp = run.path("fine", "map.txt")
    rio.write_map_model(mp, model)
    rows = ["iteration,k,mu1,mu2,f_star,constraint,norm_a"]
    for r in res.report:
        rows.append(
            f"{r[0]},{r[1]},{r[2]:.6f},{r[3]:.6f},{r[4]:.17g},{r[5]:.17g},{r[6]:.17g}"
        )
    rp = run.path("fine", "registration_report.csv")
    rio.atomic_write(rp, "\n".join(rows) + "\n")
    tmpl = run.path("fine", "templates.txt")
    rio.atomic_write(
        tmpl,
        "regmor-grid v1\n%d %d\n" % res.templates.rows.shape
        + "\n".join("%.17g" % v for v in res.templates.rows.ravel())
        + "\n",
    )
    run.record_stage("registration", key, [mp, rp, tmpl], time.perf_counter() - t0)


def _load_fine(run):
    cfg = run.cfg
    mesh = rio.read_mesh(run.path("fine", "mesh.txt"))
    ref = invert_gordon_hall(bump_channel_curves(PARAM_CENTROID[0]), mesh.vertices)
    model = None
    if cfg.variant == "lagrangian":
        model = rio.read_map_model(run.path("fine", "map.txt"))
    return mesh, ref, model


def _deform(mesh, ref, map_model, mu):
    if map_model is None:
        return gordon_hall(bump_channel_curves(mu[0]), ref)
    return map_model.deform_nodes(ParameterVector(*mu, extrapolation=True), ref)


def rom_stage(run, log=None):
    run.require("fine_mesh")
    cfg = run.cfg
    if cfg.variant == "lagrangian":
        run.require("registration")
    key = _hash_text(
        json.dumps(
            [cfg.mode, cfg.variant, cfg.n_max, cfg.tol_eq, cfg.tol_test,
             cfg.n_seed, cfg.rbf_threshold, cfg.seed, list(cfg.train_grid)],
            sort_keys=True,
        )
        + run.manifest["stages"]["fine_mesh"]["key"]
        + (run.manifest["stages"].get("registration", {}).get("key", ""))
    )
    if run.stage_fresh("rom", key):
        return
    t0 = time.perf_counter()
    mesh, ref, map_model = _load_fine(run)
    gas = GasModel(cfg.gamma)
    mus = train_grid(cfg)
    mesh_checksum = rio.sha256_file(run.path("fine", "mesh.txt"))
    outputs = []

    snap_cache = {}

    def hf_solve(mu, init=None):
        tag = _mu_tag(mu)
        fp = run.path("fine", f"snap_{cfg.variant}_{tag}.txt")
        if tag in snap_cache:
            return snap_cache[tag]
        if os.path.exists(fp):
            vec, _, chk = rio.read_field(fp)
            if chk == mesh_checksum:
                U = vec.reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
                snap_cache[tag] = U
                return U
        coords = _deform(mesh, ref, map_model, mu)
        op = EulerOperator(mesh, coords, gas, cfg.solver)
        if init is None and snap_cache:
            done = list(snap_cache)
            near = min(
                done,
                key=lambda t: np.linalg.norm(_untag(t) - np.asarray(mu)),
            )
            init = snap_cache[near]
        U, info = solve_steady(op, mu[1], init=init)
        if log:
            log(f"hf {cfg.variant} {np.round(mu, 4)}: {info['steps']} steps")
        rio.write_field(fp, U.transpose(2, 0, 1).reshape(-1), mu, mesh_checksum)
        outputs.append(fp)
        snap_cache[tag] = U
        return U

    X = BlockGram(mesh, "L2")
    Xtest = BlockGram(mesh, "H1")
    if cfg.mode == "pod":
        snaps = [hf_solve(mu) for mu in mus]
        vecs = [U.transpose(2, 0, 1).reshape(-1) for U in snaps]
        Z = pod_fields(vecs, X, count=min(cfg.n_max, len(vecs)))
        jacs = []
        for mu, U in zip(mus, snaps):
            op = EulerOperator(mesh, _deform(mesh, ref, map_model, mu), gas, cfg.solver)
            op.set_freestream(mu[1])
            jacs.append(op.jacobian(U))
        Y = build_test_rob(jacs, Z, Xtest, cfg.tol_test)
        alphas = np.array([Z.T @ X.apply(v) for v in vecs])
        areas = ElementGeometry(mesh).areas
        Gb, bb = [], []
        for mu, U, a in zip(mus, snaps, alphas):
            op = EulerOperator(mesh, _deform(mesh, ref, map_model, mu), gas, cfg.solver)
            op.set_freestream(mu[1])
            Ur = (Z @ a).reshape(4, mesh.n_elements, -1).transpose(1, 2, 0)
            g = op.eq_rows(Ur, Y)
            Gb.append(g)
            bb.append(g.sum(axis=1))
        eq = build_eq(Gb, bb, areas, cfg.tol_eq)
        model = ReducedModel(
            mesh, ref, map_model, Z, Y, eq, np.array(mus), alphas, gas,
            cfg.solver, cfg.rbf_threshold,
        )
        record = [{"N": Z.shape[1], "Q": eq.sample_count, "J_es": Y.shape[1]}]
    elif cfg.mode == "greedy":
        model, record = weak_greedy(
            np.array(mus), hf_solve, mesh, ref, map_model, cfg.n_max,
            cfg.tol_eq, cfg.tol_test, cfg.n_seed, cfg.seed, gas, cfg.solver,
            log=log,
        )
    else:
        raise StageError("rom", f"unknown mode {cfg.mode!r}")

    bundle = run.path("bundle", "manifest.json")
    outputs += _write_bundle(run, model, mesh_checksum, record)
    outputs.append(bundle)
    run.record_stage("rom", key, outputs, time.perf_counter() - t0)


def _untag(tag):
    a, m = tag[1:].split("_m")
    return np.array([float(a), float(m)])


def _write_bundle(run, model, mesh_checksum, record):
    cfg = run.cfg
    paths = []

    def p(name):
        q = run.path("bundle", name)
        paths.append(q)
        return q

    import shutil

    shutil.copyfile(run.path("fine", "mesh.txt"), p("mesh.txt"))
    if model.map_model is not None:
        shutil.copyfile(run.path("fine", "map.txt"), p("map.txt"))
    _write_matrix(p("rob_trial.txt"), model.Z)
    _write_matrix(p("rob_test.txt"), model.Y)
    rows = ["%d %.17g" % (k, w) for k, w in zip(model.eq.indices, model.eq.weights[model.eq.indices])]
    rio.atomic_write(p("eq_weights.txt"), "\n".join(rows) + "\n")
    arows = []
    for mu, al in zip(model.train_mus, model.train_alphas):
        arows.append(
            " ".join("%.17g" % v for v in mu) + " " + " ".join("%.17g" % v for v in al)
        )
    rio.atomic_write(p("alpha_train.txt"), "\n".join(arows) + "\n")
    manifest = {
        "format": "regmor-bundle v1",
        "variant": cfg.variant,
        "mode": cfg.mode,
        "n_modes": int(model.Z.shape[1]),
        "j_es": int(model.Y.shape[1]),
        "eq_samples": int(model.eq.sample_count),
        "n_elements": int(model.mesh.n_elements),
        "tolerances": {
            "tol_eq": cfg.tol_eq,
            "tol_test": cfg.tol_test,
            "solver_tol": cfg.solver.tol,
            "tol_registration": cfg.registration.tol,
            "tol_pod_map": cfg.registration.tol_pod,
            "r_min": cfg.registration.r_min,
        },
        "gamma": cfg.gamma,
        "seed": cfg.seed,
        "rbf_threshold": cfg.rbf_threshold,
        "mesh_checksum": mesh_checksum,
        "greedy_record": [
            {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in r.items()}
            for r in record
        ],
        "checksums": {
            os.path.basename(q): rio.sha256_file(q) for q in paths
        },
    }
    rio.atomic_write(
        run.path("bundle", "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True),
    )
    return paths


def _write_matrix(path, A):
    buf = ["regmor-matrix v1", "%d %d" % A.shape]
    for row in np.asarray(A, float).T:
        buf.append(" ".join("%.17g" % v for v in row))
    rio.atomic_write(path, "\n".join(buf) + "\n")


def _read_matrix(path):
    with open(path) as f:
        lines = f.read().split("\n")
    if lines[0].strip() != "regmor-matrix v1":
        raise rio.FormatError("bad matrix header")
    m, n = (int(t) for t in lines[1].split())
    A = np.loadtxt(rio._io.StringIO("\n".join(lines[2:2 + n])), ndmin=2)
    return A.T.copy().reshape(m, n)


def run_offline(cfg, outdir, log=None):
    """Execute all offline stages under `outdir`; returns the run object."""
    run = RunDirectory(outdir, cfg)
    for stage in (coarse_stage, sensor_stage, fine_mesh_stage):
        stage(run, log)
    if run.cfg.variant == "lagrangian":
        registration_stage(run, log)
    rom_stage(run, log)
    return run


def load_bundle(bundle_dir):
    """Reconstruct a ReducedModel from a bundle directory."""
    with open(os.path.join(bundle_dir, "manifest.json")) as f:
        man = json.load(f)
    for name, sha in man["checksums"].items():
        full = os.path.join(bundle_dir, name)
        if not os.path.exists(full) or rio.sha256_file(full) != sha:
            raise StageError("bundle", f"artifact {name} missing or corrupted")
    mesh = rio.read_mesh(os.path.join(bundle_dir, "mesh.txt"))
    ref = invert_gordon_hall(bump_channel_curves(PARAM_CENTROID[0]), mesh.vertices)
    map_model = None
    if man["variant"] == "lagrangian":
        map_model = rio.read_map_model(os.path.join(bundle_dir, "map.txt"))
    Z = _read_matrix(os.path.join(bundle_dir, "rob_trial.txt"))
    Y = _read_matrix(os.path.join(bundle_dir, "rob_test.txt"))
    ne = mesh.n_elements
    weights = np.zeros(ne)
    for line in open(os.path.join(bundle_dir, "eq_weights.txt")):
        if line.strip():
            k, w = line.split()
            weights[int(k)] = float(w)
    data = np.loadtxt(os.path.join(bundle_dir, "alpha_train.txt"), ndmin=2)
    model = ReducedModel(
        mesh, ref, map_model, Z, Y, EQRule(weights, 0.0, 0.0),
        data[:, :2], data[:, 2:], GasModel(man["gamma"]),
        rbf_threshold=man.get("rbf_threshold", 9),
    )
    return model, man


def run_online(bundle_dir, mu, out_dir=None, reference=None):
    """Online stage: solve the ROM and write the deformed-mesh artifacts."""
    model, man = load_bundle(bundle_dir)
    result = evaluate_online(model, mu, reference=reference)
    if out_dir is not None:
        tag = _mu_tag(np.asarray(mu, float))
        mesh2 = model.mesh.with_vertices(result["coords"])
        rio.write_mesh(os.path.join(out_dir, f"deformed_mesh_{tag}.txt"), mesh2)
        if "state" in result:
            rio.write_field(
                os.path.join(out_dir, f"rom_field_{tag}.txt"),
                result["state"].transpose(2, 0, 1).reshape(-1),
                np.asarray(mu, float),
                man["mesh_checksum"],
            )
    return result
