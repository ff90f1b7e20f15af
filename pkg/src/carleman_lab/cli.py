"""Command-line front end.

    carleman forward CONFIG            solve, write y.fld / zeta.fld, print norms
    carleman observe CONFIG --field F  apply the observation to a stored field
    carleman verify-l2 CONFIG          L2 Carleman ratio table -> verify_l2.csv
    carleman verify-lq CONFIG          L^q Carleman ratio table -> verify_lq.csv
    carleman reconstruct CONFIG        Tikhonov reconstructions -> reconstruct.csv
    carleman sweep CONFIG              both ratio tables -> sweep.csv
    carleman check-hypotheses CONFIG   H1-H5 report

Exit status: 0 ok, 2 configuration error, 3 numeric anomaly, 4 unconverged.
The worker count comes from ``threads`` in the config or ``CARLEMAN_THREADS``.
"""

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from carleman_lab import fieldio, harness, inverse, norms
from carleman_lab.config import ConfigError, coefficient_array, load_config
from carleman_lab.errors import (DomainError, HypothesisViolation, NumericError, ParameterError,
                                 SamplingError, SingularityError, SolverError)
from carleman_lab.fieldio import FieldFormatError
from carleman_lab.forward import (BoundarySpec, ObservationSpec, Problem, SystemCoefficients,
                                  check_hypotheses)
from carleman_lab.geometry import build_annulus_grid
from carleman_lab.weights import CarlemanParams, final_time_for_width

log = logging.getLogger("carleman")

EXIT_OK, EXIT_CONFIG, EXIT_ANOMALY, EXIT_UNCONVERGED = 0, 2, 3, 4


# setup from config


class Setup:
    """Coefficients and sources described by a config, instantiable on any grid."""

    def __init__(self, cfg, T=None):
        self.cfg = cfg
        g = cfg.grid
        self.T = g.T if T is None else T
        self.base = build_annulus_grid(g.r0, g.r1, g.nr, g.ntheta, self.T, g.nt)
        self.case = None
        sysc = cfg.system
        if sysc.preset == "desk":
            self.coeffs, self.bspec, self.ospec = inverse.desk_system()
        elif sysc.preset == "manufactured-dirichlet":
            from carleman_lab.manufactured import dirichlet_case

            self.case = dirichlet_case(g.r0, g.r1)
        elif sysc.preset == "manufactured-robin":
            from carleman_lab.manufactured import robin_dirichlet_case

            self.case = robin_dirichlet_case(g.r0, g.r1, T=self.T)
        else:
            self._custom(sysc)
        if self.case is not None:
            self.coeffs, self.bspec, self.ospec = self.case.coefficients(), self.case.bspec, self.case.ospec
        self.n = self.coeffs.n
        self.theta = sysc.theta
        self._basis = {}

    def _custom(self, s):
        n = s.n
        if s.diffusion is None:
            raise ConfigError("custom system needs system.diffusion")
        a = coefficient_array(s.diffusion, (n, 2, 2))
        b = None if s.drift is None else coefficient_array(s.drift, (n, 2))
        c = None if s.coupling is None else coefficient_array(s.coupling, (n, n))
        self.coeffs = SystemCoefficients(n, a, b, c, s.mu)
        if s.beta is not None or s.eta is not None:
            if s.beta is None or s.eta is None:
                raise ConfigError("system.beta and system.eta must be given together")
            beta, eta = np.array(s.beta, float), np.array(s.eta, float)
            if beta.shape != (n, 2) or eta.shape != (n, 2):
                raise ConfigError("system.beta and system.eta must have shape (n, 2)")
            self.bspec = BoundarySpec(beta, eta)
        else:
            inner = s.inner or ["D"] * n
            outer = s.outer or ["D"] * n
            if len(inner) != n or len(outer) != n or any(k not in "DNR" for k in inner + outer):
                raise ConfigError("system.inner/outer need n entries among 'D', 'N', 'R'")
            self.bspec = BoundarySpec.from_kinds(list(zip(inner, outer)), tuple(s.robin))
        gam = np.ones(n) if s.gamma is None else np.array(s.gamma, float)
        dlt = np.zeros(n) if s.delta is None else np.array(s.delta, float)
        if gam.shape != (n,) or dlt.shape != (n,):
            raise ConfigError("system.gamma and system.delta need n entries")
        self.ospec = ObservationSpec(gam, dlt)

    def grid(self, refined=False):
        return self.base.refined() if refined else self.base

    def problem(self, grid, validate=True):
        return Problem(grid, self.coeffs, self.bspec, self.ospec, theta=self.theta, validate=validate)

    def basis(self, grid):
        key = grid.signature()
        if key not in self._basis:
            self._basis[key] = inverse.bump_basis(grid, self.n)
        return self._basis[key]

    def source(self, grid, k):
        """``(g, y0)`` of sample ``k`` on ``grid``; the same continuous source on every grid."""
        src = self.cfg.source
        rng = np.random.default_rng((self.cfg.seed, src.seed, k))
        zero = np.zeros((self.n,) + grid.space_shape)
        if src.kind == "zero":
            g, y0 = np.zeros((self.n,) + grid.shape), zero
        elif src.kind == "manufactured":
            g, y0 = self.case.source(grid), self.case.initial(grid)
        elif src.kind == "bumps":
            g, y0 = inverse.random_bumps(grid, self.n, rng), zero
        elif src.kind == "basis":
            B = self.basis(grid)
            g, y0 = B.synth(B.random_coefficients(rng)), zero
        else:
            g = fieldio.read_field(self.cfg.resolve(src.path))
            if g.shape != (self.n,) + grid.shape:
                raise ConfigError(f"source field has shape {g.shape}, expected {(self.n,) + grid.shape}")
            y0 = zero
        return src.scale * g, src.scale * y0

    def hypotheses(self, grid, with_sources=True):
        g = None
        if with_sources and self.cfg.source.kind != "manufactured":
            g = np.stack([self.source(grid, k)[0] for k in range(self.cfg.source.samples)])
        return check_hypotheses(self.coeffs, self.bspec, self.ospec, grid, g=g)

    def validate(self):
        rep = self.hypotheses(self.base)
        if not rep.passed:
            raise ConfigError("hypotheses violated: " + "; ".join(
                f"{r.name} margin={r.margin:.3g} at {r.witness}" for r in rep.failures()))
        return rep


def worker_count(cfg):
    env = os.environ.get("CARLEMAN_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"CARLEMAN_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("CARLEMAN_THREADS must be >= 1")
        return n
    return cfg.threads


def pmap(fn, items, workers):
    """Ordered map over a thread pool (results in input order)."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def out_path(cfg, name):
    return os.path.join(cfg.resolve(cfg.output), name)


# commands


def cmd_forward(cfg, args):
    setup = Setup(cfg)
    setup.validate()
    grid = setup.base
    prob = setup.problem(grid)
    results, lines = [], []
    for k in range(cfg.source.samples):
        g, y0 = setup.source(grid, k)
        y = prob.solve(g, y0)
        zeta = prob.observe(y)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(zeta))):
            raise NumericError("non-finite solution")
        line = (f"sample={k} |y|_L2(Q)={norms.lq_norm(y, grid, 2):.6e} "
                f"|zeta|_L2(Sigma1)={norms.lq_norm(zeta, grid, 2, 'Sigma1'):.6e} "
                f"|g|_L2(Q)={norms.lq_norm(g, grid, 2):.6e}")
        if setup.case is not None and cfg.source.kind == "manufactured":
            ex = setup.case.exact(grid)
            line += f" l2_error={norms.lq_norm(y - ex, grid, 2) / norms.lq_norm(ex, grid, 2):.6e}"
        results.append((y, zeta))
        lines.append(line)
    # nothing is written until every sample has been computed
    for k, (y, zeta) in enumerate(results):
        sfx = "" if cfg.source.samples == 1 else f"_{k}"
        fieldio.write_field(out_path(cfg, f"y{sfx}.fld"), y)
        fieldio.write_field(out_path(cfg, f"zeta{sfx}.fld"), zeta)
        if args.csv:
            fieldio.write_field_csv(out_path(cfg, f"y{sfx}.csv"), y, grid)
            fieldio.write_field_csv(out_path(cfg, f"zeta{sfx}.csv"), zeta)
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_observe(cfg, args):
    setup = Setup(cfg)
    setup.validate()
    grid = setup.base
    path = args.field or out_path(cfg, "y.fld")
    if not os.path.isfile(path):
        raise ConfigError(f"field file not found: {path}")
    y = fieldio.read_field(path)
    if y.shape != (setup.n,) + grid.shape:
        raise ConfigError(f"field has shape {y.shape}, expected {(setup.n,) + grid.shape}")
    zeta = setup.problem(grid).observe(y)
    dest = args.out or out_path(cfg, "zeta.fld")
    fieldio.write_field(dest, zeta)
    print(f"|zeta|_L2(Sigma1)={norms.lq_norm(zeta, grid, 2, 'Sigma1'):.6e} -> {dest}")
    return EXIT_OK


def _final_time(cfg, kind, lam):
    c = cfg.carleman
    if c.final_time != "auto":
        return cfg.grid.T
    smax = max(c.s)
    if kind == "l2":
        s_eff = 2 * smax
    else:
        s_eff = max(c.q) * CarlemanParams(lam, smax, c.gamma_bar, K=c.K).s_prime
    return final_time_for_width(lam, c.K, s_eff, c.width)


def _bundle(setup, grid, k):
    prob = setup.problem(grid)
    g, y0 = setup.source(grid, k)
    y = prob.solve(g, y0)
    return {"grid": grid, "problem": prob, "g": g, "y": y, "zeta": prob.observe(y),
            "derivs": norms.derivative_fields(y, grid)}


def _report(kind, b, params, q):
    args = (b["y"], b["g"], b["zeta"], params)
    kw = {"problem": b["problem"], "derivs": b["derivs"]}
    if kind == "l2":
        return harness.verify_l2_carleman(*args, b["grid"], **kw)
    return harness.verify_lq_carleman(*args, q, b["grid"], **kw)


def carleman_rows(cfg, kind, workers):
    """Rows keyed by (lam, s, q, sample) for one estimate, in sorted key order."""
    c = cfg.carleman
    qs = [2.0] if kind == "l2" else sorted(float(q) for q in c.q)
    lams, ss = sorted(float(v) for v in c.lam), sorted(float(v) for v in c.s)
    setups = {lam: Setup(cfg, _final_time(cfg, kind, lam)) for lam in lams}
    for st in setups.values():
        st.validate()
    jobs = [(lam, k, fine) for lam in lams for k in range(cfg.source.samples)
            for fine in ((False, True) if c.refine else (False,))]
    bundles = dict(zip(jobs, pmap(lambda j: _bundle(setups[j[0]], setups[j[0]].grid(j[2]), j[1]),
                                  jobs, workers)))
    cells = [(lam, s, q, k) for lam in lams for s in ss for q in qs for k in range(cfg.source.samples)]

    def run(cell):
        lam, s, q, k = cell
        params = CarlemanParams(lam, s, c.gamma_bar, K=c.K)
        rep = _report(kind, bundles[(lam, k, False)], params, q)
        row = {"kind": kind, "lam": lam, "s": s, "q": q, "sample": k, "T": setups[lam].T}
        if c.refine:
            fine = _report(kind, bundles[(lam, k, True)], params, q)
            ok, changes = harness.refinement_check(rep, fine, c.rtol)
            rep.unconverged = not ok
            row["log_ratio_fine"] = fine.log_ratio
            row["max_change"] = max(changes.values()) if changes else 0.0
        else:
            row["log_ratio_fine"] = math.nan
            row["max_change"] = math.nan
        row.update(log_lhs=rep.log_lhs, log_rhs=rep.log_rhs, log_ratio=rep.log_ratio, ratio=rep.ratio,
                   unconverged=rep.unconverged, anomaly=rep.anomaly)
        for name, v in rep.log_lhs_terms.items():
            row[f"lhs_{name}"] = v
        for name, v in rep.log_rhs_terms.items():
            row[f"rhs_{name}"] = v
        return row

    return pmap(run, cells, workers)


def _term_columns(kind):
    lhs, rhs = (harness.L2_LHS, harness.L2_RHS) if kind == "l2" else (harness.LQ_LHS, harness.LQ_RHS)
    return [f"lhs_{t}" for t in lhs] + [f"rhs_{t}" for t in rhs]


BASE_COLUMNS = ["kind", "lam", "s", "q", "sample", "T", "log_lhs", "log_rhs", "log_ratio", "ratio",
                "log_ratio_fine", "max_change", "unconverged", "anomaly"]


def _exit_for(rows):
    if any(r.get("anomaly") for r in rows):
        n = sum(bool(r.get("anomaly")) for r in rows)
        log.error("%d anomalous rows", n)
        return EXIT_ANOMALY
    if any(r.get("unconverged") for r in rows):
        log.warning("%d unconverged rows", sum(bool(r.get("unconverged")) for r in rows))
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_verify(cfg, args, kind):
    rows = carleman_rows(cfg, kind, worker_count(cfg))
    dest = args.out or out_path(cfg, f"verify_{kind}.csv")
    fieldio.write_report(dest, BASE_COLUMNS + _term_columns(kind), rows)
    print(f"{len(rows)} rows -> {dest}")
    return _exit_for(rows)


def cmd_sweep(cfg, args):
    workers = worker_count(cfg)
    rows = carleman_rows(cfg, "l2", workers) + carleman_rows(cfg, "lq", workers)
    cols = BASE_COLUMNS + ["term_" + t for t in harness.L2_LHS + harness.L2_RHS + harness.LQ_LHS
                           + harness.LQ_RHS]
    for r in rows:
        for key in list(r):
            if key.startswith(("lhs_", "rhs_")):
                r["term_" + key[4:]] = r.pop(key)
        for col in cols:
            r.setdefault(col, "")
    dest = args.out or out_path(cfg, "sweep.csv")
    fieldio.write_report(dest, cols, rows)
    print(f"{len(rows)} rows -> {dest}")
    return _exit_for(rows)


def _class_spec(cfg, setup, grid):
    k = cfg.klass
    G = []
    for ref in k.G_tilde:
        if ref == "ones":
            G.append(inverse.ones_dual(setup.n, grid))
        else:
            gt = fieldio.read_field(cfg.resolve(ref))
            if gt.shape != (setup.n,) + grid.shape:
                raise ConfigError(f"G_tilde field {ref!r} has shape {gt.shape}")
            G.append(gt)
    if k.delta_tilde == "auto":
        basis = setup.basis(grid) if cfg.source.kind == "basis" else None
        seeds = [10_000 + j for j in range(k.calibration_seeds)]
        dt = inverse.calibrate_delta_tilde(G, grid, k.q, seeds, setup.n, basis=basis)
    else:
        dt = float(k.delta_tilde)
    return inverse.SourceClassSpec(k.q, dt, G)


RECON_COLUMNS = ["sample", "noise", "seed", "rho", "residual_norm", "noise_norm", "relative_error",
                 "g_true_norm", "g_hat_norm", "g_hat_lq", "iterations", "converged", "unconverged"]


def cmd_reconstruct(cfg, args):
    setup = Setup(cfg)
    setup.validate()
    grid = setup.base
    inv = cfg.inverse
    prob = setup.problem(grid)
    basis = setup.basis(grid) if inv.basis == "bumps" else None
    spec = _class_spec(cfg, setup, grid)
    truths = []
    for k in range(cfg.source.samples):
        if cfg.source.kind in ("bumps", "basis"):
            seed = (cfg.seed, cfg.source.seed, k)
            g = inverse.sample_source(spec, grid, np.random.SeedSequence(seed).generate_state(1)[0],
                                      setup.n, basis if cfg.source.kind == "basis" else None)
            g = cfg.source.scale * g
        else:
            g = setup.source(grid, k)[0]
        truths.append(g)
    zetas = pmap(prob.forward_map, truths, worker_count(cfg))
    if basis is not None:
        basis.images(prob)  # build the cache once, before threads share it

    jobs = []
    for k in range(len(truths)):
        for lev in sorted(inv.noise):
            for seed in inv.seeds:
                rhos = [None] if inv.discrepancy else sorted(inv.rho, reverse=True)
                for rho in rhos:
                    jobs.append((k, float(lev), int(seed), rho))

    def run(job):
        k, lev, seed, rho = job
        g, z = truths[k], zetas[k]
        if lev > 0:
            zn, nn = inverse.add_noise(z, lev, np.random.default_rng((seed, k, int(round(lev * 1e9)))), prob)
        else:
            zn, nn = z, 0.0
        gt = g if np.any(g) else None
        if rho is None:
            res = inverse.discrepancy_reconstruct(zn, nn, prob, inv.rho, basis=basis, tau=inv.tau, g_true=gt,
                                                  nonneg=inv.nonneg, tol=inv.tol, maxiter=inv.maxiter)
        else:
            res = inverse.reconstruct(zn, float(rho), prob, basis=basis, tol=inv.tol, maxiter=inv.maxiter,
                                      nonneg=inv.nonneg, g_true=gt)
        if not np.all(np.isfinite(res.g_hat)):
            raise NumericError("non-finite reconstruction")
        return {"sample": k, "noise": lev, "seed": seed, "rho": res.rho, "residual_norm": res.residual_norm,
                "noise_norm": nn, "relative_error": "" if res.relative_error is None else res.relative_error,
                "g_true_norm": norms.lq_norm(g, grid, 2), "g_hat_norm": norms.lq_norm(res.g_hat, grid, 2),
                "g_hat_lq": norms.lq_norm(res.g_hat, grid, spec.q), "iterations": res.iterations,
                "converged": res.converged, "unconverged": not res.converged}

    rows = pmap(run, jobs, worker_count(cfg))
    dest = args.out or out_path(cfg, "reconstruct.csv")
    fieldio.write_report(dest, RECON_COLUMNS, rows)
    print(f"{len(rows)} rows -> {dest}")
    return _exit_for(rows)


def cmd_check_hypotheses(cfg, args):
    setup = Setup(cfg)
    rep = setup.hypotheses(setup.base)
    for line in rep.lines():
        print(line)
    return EXIT_OK if rep.passed else EXIT_CONFIG


COMMANDS = {
    "forward": cmd_forward,
    "observe": cmd_observe,
    "verify-l2": lambda cfg, a: cmd_verify(cfg, a, "l2"),
    "verify-lq": lambda cfg, a: cmd_verify(cfg, a, "lq"),
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "check-hypotheses": cmd_check_hypotheses,
}


def build_parser():
    p = argparse.ArgumentParser(prog="carleman", description="Carleman-weight experiments on an annulus.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--output", help="override the output directory")
        if name in ("observe", "verify-l2", "verify-lq", "reconstruct", "sweep"):
            sp.add_argument("--out", help="destination file")
        if name == "observe":
            sp.add_argument("--field", help="stored y field (default OUTPUT/y.fld)")
        if name == "forward":
            sp.add_argument("--csv", action="store_true", help="also write CSV exports")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg.output = os.path.abspath(args.output)
        worker_count(cfg)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ParameterError, HypothesisViolation, DomainError, FieldFormatError, SamplingError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SingularityError, SolverError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_ANOMALY


if __name__ == "__main__":
    sys.exit(main())
