"""Command-line interface.

Every subcommand reads the config (defaults < ``--config`` file < environment
< flags), does one step of the workflow inside the workspace ``--out`` and
writes its artifacts next to a small JSON manifest naming the config, seed and
input digests that produced them.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 sampling
budget exhausted, 5 missing / corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import Config, load_config, parse_omega
from .domains import nav2d as N
from .domains import rearrangement as R
from .domains import render
from .errors import ArtifactError, ConceptInvError, ConfigError
from .evaluation import csv_text, write_csv, write_json
from .storage import DatasetRecord, atomic_write, file_digest, read_jsonl, write_jsonl
from .concepts import InversionResult, invert

log = logging.getLogger("conceptinv")

COMMANDS = ("gen-data", "train", "invert", "generate", "rollout", "evaluate", "ablate", "sweep", "compare",
            "render", "recipe")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (INI sections; see --dump-config)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="workspace directory")
    p.add_argument("--domain", choices=sorted(P.DOMAINS), help="task domain")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING ...")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptinv", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate training data and demonstrations as JSONL",
        "train": "train the diffusion denoiser and write a checkpoint",
        "invert": "learn concept components from demonstrations",
        "generate": "sample from a training concept or an inversion result",
        "rollout": "closed-loop vs open-loop execution (nav2d)",
        "evaluate": "accuracy of one setting as CSV",
        "ablate": "K = 1 vs K = 2 table over all settings",
        "sweep": "guidance-weight sweep for one setting",
        "compare": "diffusion vs BC vs VAE on every setting",
        "render": "SVG drawings of samples or dataset records",
        "recipe": "run the full reference experiment",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        _common(p)
        if name in ("invert", "generate", "rollout", "evaluate", "sweep", "render"):
            p.add_argument("--k", type=int, help="number of concept components")
            p.add_argument("--omega", help="'learned' or a fixed guidance weight (1.2, 1.4, 1.6, 1.8)")
        if name in ("generate", "rollout", "evaluate", "sweep", "render", "recipe", "ablate", "compare"):
            p.add_argument("--alpha", type=float, help="sampling temperature in [0, 1)")
        if name in ("train", "invert"):
            p.add_argument("--steps", type=int, help="optimisation steps")
        if name == "invert":
            p.add_argument("--demos", help="JSONL demonstrations (default: the workspace demos of --label)")
            p.add_argument("--label", help="task label whose workspace demos to use")
            p.add_argument("--result", help="where to write the inversion JSON")
        if name in ("generate", "render"):
            p.add_argument("--label", help="training concept or new-task label")
            p.add_argument("--inversion", help="inversion JSON to sample from")
            p.add_argument("--n", type=int, default=None, help="number of samples")
        if name == "render":
            p.add_argument("--input", help="JSONL records to draw instead of sampling")
        if name in ("evaluate", "sweep"):
            p.add_argument("--setting", help="evaluation setting (e.g. training, composition, new-concept)")
            p.add_argument("--n", type=int, default=None, help="samples per task")
        if name in ("rollout", "recipe"):
            p.add_argument("--replan-every", type=int, help="replan interval in environment steps")
        if name == "rollout":
            p.add_argument("--n", type=int, default=None, help="episodes per task")
        if name == "recipe":
            p.add_argument("--domains", default="rearrangement,nav2d", help="comma-separated domains")
    return parser


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.out is not None:
        cfg.set("run", "out", args.out)
    if args.domain is not None:
        cfg.set("run", "domain", args.domain)
    if args.log_level is not None:
        cfg.set("run", "log_level", args.log_level)
    dom = cfg.get("run", "domain")
    if dom not in P.DOMAINS:
        raise ConfigError(f"unknown domain {dom!r}")
    if getattr(args, "k", None) is not None:
        if args.k < 1:
            raise ConfigError("--k must be >= 1")
        cfg.set(dom, "k", args.k)
    if getattr(args, "omega", None) is not None:
        parse_omega(args.omega)
        cfg.set(dom, "omega", args.omega)
    if getattr(args, "alpha", None) is not None:
        if not 0.0 <= args.alpha < 1.0:
            raise ConfigError("--alpha must lie in [0, 1)")
        cfg.set("diffusion", "alpha", args.alpha)
    if getattr(args, "steps", None) is not None:
        if args.command == "train":
            cfg.set(dom, "train_steps", args.steps)
        else:
            cfg.set("inversion", "steps", args.steps)
    if getattr(args, "replan_every", None) is not None:
        if args.replan_every < 1:
            raise ConfigError("--replan-every must be >= 1")
        cfg.set("nav2d", "replan_every", args.replan_every)
    return cfg


def _manifest(path: Path, sess: P.Session, extra: dict) -> None:
    info = {"artifact": path.name, "digest": file_digest(path), "seed": sess.cfg.get("run", "seed"),
            "domain": sess.name, "config": P.portable_config(sess.cfg), **extra}
    ck = sess.ws.checkpoint(sess.name)
    if ck.exists():
        info["checkpoint_digest"] = file_digest(ck)
    if sess.ws.manifest(sess.name).exists():
        info["dataset_digest"] = sess.dataset_digest()
    write_json(path.with_name(path.name + ".manifest.json"), info)


def _summary_csv(sess: P.Session, path: Path, rows, columns=None, extra=None) -> None:
    write_csv(path, rows, columns)
    _manifest(path, sess, extra or {})
    sys.stdout.write(csv_text(rows, columns))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(sess: P.Session, args) -> None:
    m = sess.gen_data()
    print(f"{sess.name}: {m['training_total']} training records in {len(m['training_counts'])} files, "
          f"{sum(m['demo_counts'].values())} demonstrations -> {sess.ws.data(sess.name)}")


def cmd_train(sess: P.Session, args) -> None:
    sess.train()
    path = sess.ws.checkpoint(sess.name)
    print(f"checkpoint {path} sha256 {file_digest(path)}")


def cmd_invert(sess: P.Session, args) -> None:
    sec = sess.dom.sec
    k, omega = sec["k"], parse_omega(sec["omega"])
    if args.demos:
        recs = read_jsonl(args.demos, (sess.dom.state_width, sess.dom.s0_width or None))
        if not recs:
            raise ArtifactError(f"{args.demos} holds no records")
        label = recs[0].label
        model, schedule, vocab, ck = sess.model()
        X, S = sess.dom.demo_arrays(recs)
        res = invert(model, schedule, vocab.null, X, S, sess.inversion_options(k, omega),
                     sess.rng.child("invert", label, k, P.omega_tag(omega)))
        res.config.update(label=label, checkpoint_digest=ck.digest, demos_digest=file_digest(args.demos))
    elif args.label:
        res = sess.inversion(args.label, k, omega, refresh=True)
        label = args.label
    else:
        raise ConfigError("invert needs --demos FILE or --label LABEL")
    path = Path(args.result) if args.result else sess.ws.inversion(sess.name, label, k, omega)
    write_json(path, res.to_json())
    _manifest(path, sess, {"label": label, "k": k, "omega": P.omega_tag(omega)})
    print(f"{path}: K={res.k} weights={[round(w, 4) for w in res.weights]} final loss {res.final_loss:.5f}")
    for flag in res.weight_flags:
        print(f"warning: {flag}")


def _spec_and_context(sess: P.Session, args, n: int):
    _, _, vocab, _ = sess.model()
    alpha = sess.cfg.get("diffusion", "alpha")
    label = args.label
    if args.inversion:
        try:
            res = InversionResult.from_json(json.loads(Path(args.inversion).read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise ArtifactError(f"cannot read inversion {args.inversion}: {err}") from None
        label = label or res.config.get("label")
        omega = parse_omega(sess.dom.sec["omega"]) if args.omega else None
        spec = res.spec(vocab.null, alpha, None if omega in (None, "learned") else omega)
        setting = "new-initial-state" if sess.name == "nav2d" else "new-concept"
    elif label in vocab:
        spec = sess.spec("training", label, 1, None)
        setting = "training"
    elif label:
        setting = _setting_of(sess, label)
        spec = sess.spec(setting, label, sess.dom.sec["k"], sess.dom.sec["omega"])
    else:
        raise ConfigError("need --label or --inversion")
    if label is None:
        raise ConfigError("cannot tell which task the inversion belongs to; pass --label")
    ctx = sess.dom.context("new-initial-state" if sess.name == "nav2d" else setting, label, n,
                           sess.rng.child("context", "cli"), None)
    return label, spec, ctx


def _setting_of(sess: P.Session, label: str) -> str:
    """First non-training setting that lists ``label`` and can be generated on fresh states."""
    for setting, labels in sess.dom.settings.items():
        if setting == "training" or (setting == "composition" and sess.name == "nav2d"):
            continue
        if label in labels:
            return setting
    raise ConfigError(f"{label!r} is not a task of {sess.name}")


def cmd_generate(sess: P.Session, args) -> None:
    n = args.n or sess.dom.sec["eval_n"]
    label, spec, ctx = _spec_and_context(sess, args, n)
    x = sess.generate(spec, ctx, sess.rng.child("cli-generate", label))
    recs = _as_records(sess, label, x, ctx)
    path = sess.ws.root / "samples" / sess.name / f"{P.slug(label)}.jsonl"
    write_jsonl(path, recs)
    acc = float(np.mean(sess.dom.score(label, x, ctx))) if _scorable(sess, label) else None
    _manifest(path, sess, {"label": label, "n": n, "accuracy": acc})
    print(f"{n} samples -> {path}" + (f" (accuracy {acc:.3f})" if acc is not None else ""))


def _scorable(sess, label) -> bool:
    try:
        if sess.name == "rearrangement":
            R.parse_label(label)
        else:
            N.parse_label(label)
        return True
    except KeyError:
        return False


def _as_records(sess: P.Session, label: str, x: np.ndarray, ctx) -> list[DatasetRecord]:
    prov = {"seed": sess.cfg.get("run", "seed"), "generated": True}
    if sess.name == "nav2d":
        tr = N.decode_traj(x)
        return [DatasetRecord(sess.name, label, tr[i], ctx.s0[i], {**prov, "index": i}) for i in range(len(tr))]
    sc = R.decode(x)
    return [DatasetRecord(sess.name, label, sc[i][None, :], None, {**prov, "index": i}) for i in range(len(sc))]


def cmd_rollout(sess: P.Session, args) -> None:
    if sess.name != "nav2d":
        raise ConfigError("rollout needs --domain nav2d")
    rows = sess.closed_loop(sess.dom.sec["k"], sess.dom.sec["omega"], n=args.n)
    path = sess.ws.reports / "nav2d_closed_loop.csv"
    _summary_csv(sess, path, rows, extra={"replan_every": sess.dom.sec["replan_every"]})


def cmd_evaluate(sess: P.Session, args) -> None:
    setting = args.setting or "training"
    k, omega = sess.dom.sec["k"], sess.dom.sec["omega"]
    s = sess.evaluate(setting, k, omega, n=args.n)
    rows = P._summary_rows(setting, k if setting != "training" else "", None if setting == "training" else omega, s)
    path = sess.ws.reports / f"{sess.name}_{setting}.csv"
    _summary_csv(sess, path, rows, P.TASK_COLUMNS, {"setting": setting})


def cmd_ablate(sess: P.Session, args) -> None:
    settings = [s for s in sess.dom.settings if s != "training"]
    omega = sess.dom.sec["omega"]
    rows = []
    for setting in settings:
        for k in (1, 2):
            s = sess.evaluate(setting, k, omega)
            rows.append({"setting": setting, "k": k, "omega": P.omega_tag(parse_omega(omega)),
                         "mean": s.mean, "sem": s.sem})
    path = sess.ws.reports / f"{sess.name}_ablation.csv"
    _summary_csv(sess, path, rows, ("setting", "k", "omega", "mean", "sem"))


def cmd_sweep(sess: P.Session, args) -> None:
    default = "new-training" if sess.name == "rearrangement" else "new-initial-state"
    setting = args.setting or default
    k = sess.dom.sec["k"]
    from .evaluation import omega_sweep
    rows = omega_sweep(lambda w: sess.evaluate(setting, k, w, n=args.n), (*P.FIXED_OMEGA_GRID, "learned"))
    rows = [{"setting": setting, **r} for r in rows]
    path = sess.ws.reports / f"{sess.name}_omega_sweep.csv"
    _summary_csv(sess, path, rows, ("setting", "omega", "mean", "sem", "tasks", "n"))


def cmd_compare(sess: P.Session, args) -> None:
    k, omega = sess.dom.sec["k"], sess.dom.sec["omega"]
    rows = []
    for setting in sess.dom.settings:
        s = sess.evaluate(setting, k, omega)
        rows.append({"method": "diffusion", "setting": setting, "mean": s.mean, "sem": s.sem})
        for method in ("bc", "vae"):
            if method == "vae" and setting == "new-training":
                continue
            b = sess.evaluate_baseline(method, setting)
            rows.append({"method": method, "setting": setting, "mean": b.mean, "sem": b.sem})
    path = sess.ws.reports / f"{sess.name}_compare.csv"
    _summary_csv(sess, path, rows, ("method", "setting", "mean", "sem"))


def cmd_render(sess: P.Session, args) -> None:
    if args.input:
        recs = read_jsonl(args.input)
        label = recs[0].label if recs else "empty"
    else:
        n = args.n or 10
        label, spec, ctx = _spec_and_context(sess, args, n)
        x = sess.generate(spec, ctx, sess.rng.child("cli-render", label))
        recs = _as_records(sess, label, x, ctx)
    out = sess.ws.root / "render" / f"{sess.name}-{P.slug(label)}.svg"
    if sess.name == "rearrangement":
        svg = render.scenes_svg(np.stack([r.traj[0] for r in recs]), label)
    else:
        svg = render.nav_svg(recs[0].s0, [r.traj for r in recs[:1]], label)
        if len(recs) > 1:
            # one panel per initial state
            panels = [render.nav_svg(r.s0, [r.traj], label) for r in recs]
            svg = panels[0]
            for i, panel in enumerate(panels[1:], 1):
                atomic_write(out.with_name(f"{out.stem}-{i}.svg"), panel)
    atomic_write(out, svg)
    print(f"wrote {out}")


def cmd_recipe(sess_cfg: Config, args) -> None:
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    for d in domains:
        if d not in P.DOMAINS:
            raise ConfigError(f"unknown domain {d!r}")
    summary = P.reference_recipe(sess_cfg, sess_cfg.get("run", "out"), domains)
    for rel, digest in summary["reports"].items():
        print(f"{digest[:16]}  {rel}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "invert": cmd_invert, "generate": cmd_generate,
            "rollout": cmd_rollout, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "sweep": cmd_sweep,
            "compare": cmd_compare, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dumps())
            return 0
        logging.basicConfig(level=getattr(logging, str(cfg.get("run", "log_level")).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "recipe":
            cmd_recipe(cfg, args)
            return 0
        sess = P.Session(cfg.get("run", "domain"), cfg, P.Workspace(cfg.get("run", "out")))
        HANDLERS[args.command](sess, args)
        return 0
    except ConceptInvError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except KeyError as err:
        print(f"error: unknown label {err}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
