"""End-to-end workflow: data -> denoiser -> inversion -> generation -> reports.

A :class:`Workspace` fixes where every artifact lives, a :class:`Domain`
adapter hides the per-domain data plumbing, and a :class:`Session` ties a
domain, a config and a workspace together.  :func:`reference_recipe` runs the
documented end-to-end experiment and writes the report CSVs; every random
draw comes from a named stream of the configured seed, so the reports are
reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines as B
from .concepts import ConceptVocabulary, InversionOptions, InversionResult, freeze_guard, invert
from .config import Config, parse_omega
from .diffusion import CompositionSpec, DiffusionSchedule, sample, train_denoiser
from .domains import nav2d as N
from .domains import rearrangement as R
from .errors import ArtifactError, ConfigError
from .evaluation import (Summary, accuracy, component_analysis, mean_sem, omega_sweep, pca_export,
                         specialised_component, write_csv, write_json)
from .numerics import InputLayout, Mlp, MlpDenoiser, Rng
from .storage import (Checkpoint, DatasetRecord, file_digest, load_checkpoint, prefixed, read_jsonl,
                      save_checkpoint, unprefixed, write_jsonl)

log = logging.getLogger(__name__)

FIXED_OMEGA_GRID = (1.2, 1.4, 1.6, 1.8)


def portable_config(cfg: Config) -> dict:
    """Config without the workspace path, so artifacts do not depend on where they were written."""
    d = cfg.as_dict()
    d["run"].pop("out")
    return d


def slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def omega_tag(omega) -> str:
    return "learned" if omega == "learned" else f"{float(omega):g}"


class Workspace:
    """Directory layout of one run."""

    def __init__(self, root):
        self.root = Path(root)

    def data(self, domain: str) -> Path:
        return self.root / "data" / domain

    def training_file(self, domain: str, label: str) -> Path:
        return self.data(domain) / "train" / f"{slug(label)}.jsonl"

    def demo_file(self, domain: str, label: str) -> Path:
        return self.data(domain) / "demos" / f"{slug(label)}.jsonl"

    def manifest(self, domain: str) -> Path:
        return self.data(domain) / "manifest.json"

    def checkpoint(self, domain: str, kind: str = "diffusion") -> Path:
        return self.root / "checkpoints" / f"{domain}-{kind}.ftlm"

    def inversion(self, domain: str, label: str, k: int, omega) -> Path:
        return self.root / "inversions" / domain / f"{slug(label)}-k{k}-w{omega_tag(omega)}.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def rel(self, path: Path) -> str:
        return str(Path(path).relative_to(self.root))


# --------------------------------------------------------------------------
# domain adapters
# --------------------------------------------------------------------------


@dataclass
class EvalContext:
    """Initial states (or None) and ground truth for one task's evaluation batch."""

    s0: np.ndarray | None                 # raw (n, 22) states for nav2d
    target: np.ndarray | None = None      # target slots for nav2d
    n: int = 0


class Domain:
    name: str
    x_width: int
    s0_width: int
    state_width: int
    training_labels: tuple[str, ...]
    demo_labels: tuple[str, ...]
    settings: dict[str, tuple[str, ...]]

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.sec = cfg[self.name]

    # overridden ----------------------------------------------------------
    def gen_training(self, rng: Rng) -> dict[str, list[DatasetRecord]]:
        raise NotImplementedError

    def gen_demos(self, label: str, rng: Rng) -> list[DatasetRecord]:
        raise NotImplementedError

    def training_arrays(self, data: dict[str, list[DatasetRecord]], vocab: ConceptVocabulary):
        raise NotImplementedError

    def demo_arrays(self, recs: Sequence[DatasetRecord]):
        raise NotImplementedError

    def context(self, setting: str, label: str, n: int, rng: Rng, demos: Sequence[DatasetRecord] | None) -> EvalContext:
        raise NotImplementedError

    def score(self, label: str, x: np.ndarray, ctx: EvalContext) -> np.ndarray:
        raise NotImplementedError

    def demo_label(self, setting: str, label: str) -> str:
        return label


class Rearrangement(Domain):
    name = "rearrangement"
    x_width = R.WIDTH
    s0_width = 0
    state_width = R.WIDTH
    training_labels = R.TRAINING_LABELS
    demo_labels = R.COMPOSITION_TASKS + R.NEW_CONCEPT_TASKS
    settings = {"training": R.TRAINING_LABELS, "composition": R.COMPOSITION_TASKS,
                "new-concept": R.NEW_CONCEPT_TASKS, "new-training": R.NEW_TRAINING_TASKS}

    def _records(self, label, scenes, stream) -> list[DatasetRecord]:
        seed = self.cfg.get("run", "seed")
        return [DatasetRecord(self.name, label, sc[None, :], None,
                              {"seed": seed, "stream": list(stream), "index": i})
                for i, sc in enumerate(scenes)]

    def gen_training(self, rng):
        per = self.sec["per_label"]
        return {lab: self._records(lab, R.gen_rearrangement(lab, per, rng.child("train", lab)), ("train", lab))
                for lab in self.training_labels}

    def gen_demos(self, label, rng):
        scenes = R.gen_rearrangement(label, self.sec["demos"], rng, exclusive=True)
        return self._records(label, scenes, ("demos", label))

    def training_arrays(self, data, vocab):
        X = np.concatenate([R.encode(np.stack([r.traj[0] for r in recs])) for recs in data.values()])
        C = np.concatenate([np.tile(vocab[lab], (len(recs), 1)) for lab, recs in data.items()])
        return X, C, None

    def demo_arrays(self, recs):
        return R.encode(np.stack([r.traj[0] for r in recs])), None

    def context(self, setting, label, n, rng, demos):
        return EvalContext(None, None, n)

    def score(self, label, x, ctx):
        return R.eval_rearrangement(R.decode(x), label)

    def demo_label(self, setting, label):
        return R.NEW_TRAINING_BASE if setting == "new-training" else label


class Nav2D(Domain):
    name = "nav2d"
    x_width = 2 * N.H
    s0_width = N.S0_WIDTH
    state_width = 2
    training_labels = N.TRAINING_LABELS
    demo_labels = N.NEW_TASKS
    settings = {"training": N.TRAINING_LABELS, "composition": N.NEW_TASKS, "new-initial-state": N.NEW_TASKS}

    def _records(self, label, episodes, stream) -> list[DatasetRecord]:
        seed = self.cfg.get("run", "seed")
        return [DatasetRecord(self.name, label, ep.traj, ep.s0, {"seed": seed, "stream": list(stream), "index": i})
                for i, ep in enumerate(episodes)]

    @staticmethod
    def episode(rec: DatasetRecord) -> N.Nav2DEpisode:
        return N.Nav2DEpisode(rec.label, rec.s0, rec.traj, N.target_slot(rec.label, rec.s0))

    def gen_training(self, rng):
        per = self.sec["per_label"]
        return {lab: self._records(lab, N.gen_nav2d(lab, per, rng.child("train", lab)), ("train", lab))
                for lab in self.training_labels}

    def gen_demos(self, label, rng):
        return self._records(label, N.gen_nav2d(label, self.sec["demos"], rng), ("demos", label))

    def training_arrays(self, data, vocab):
        X, S, C = [], [], []
        w = self.sec["window_max"]
        for lab, recs in data.items():
            for rec in recs:
                ep = self.episode(rec)
                for off in range(min(w, N.H - 1) + 1):
                    tr, s0 = N.windows(ep, off)
                    X.append(N.encode_traj(tr))
                    S.append(N.encode_s0(s0))
                    C.append(vocab[lab])
        return np.array(X), np.array(C), np.array(S)

    def demo_arrays(self, recs):
        return (N.encode_traj(np.stack([r.traj for r in recs])), N.encode_s0(np.stack([r.s0 for r in recs])))

    def context(self, setting, label, n, rng, demos):
        if setting == "composition":
            eps = [self.episode(r) for r in demos]
        else:
            eps = N.gen_nav2d(label, n, rng.child("states", label))
        return EvalContext(np.stack([e.s0 for e in eps]), np.array([e.target for e in eps]), len(eps))

    def score(self, label, x, ctx):
        tr = N.decode_traj(x)
        return N.eval_nav2d_progress(tr, N.object_pos(ctx.s0, ctx.target), ctx.s0[:, :2])


DOMAINS = {"rearrangement": Rearrangement, "nav2d": Nav2D}


def build_domain(name: str, cfg: Config) -> Domain:
    try:
        return DOMAINS[name](cfg)
    except KeyError:
        raise ConfigError(f"unknown domain {name!r}; choose from {sorted(DOMAINS)}") from None


# --------------------------------------------------------------------------
# checkpoints of each model kind
# --------------------------------------------------------------------------


def save_denoiser(path, model: MlpDenoiser, schedule: DiffusionSchedule, vocab: ConceptVocabulary,
                  provenance: dict) -> str:
    manifest = {"schedule": schedule.to_dict(), "vocabulary": vocab.to_dict(), "layout": model.layout.to_dict(),
                "widths": list(model.widths), "provenance": provenance}
    return save_checkpoint(path, Checkpoint("diffusion", manifest, dict(model.params)))


def load_denoiser(path):
    ck = load_checkpoint(path, "diffusion")
    try:
        layout = InputLayout(**ck.manifest["layout"])
        net = Mlp(tuple(ck.manifest["widths"]), ck.tensors).with_params(ck.tensors)
        schedule = DiffusionSchedule.from_dict(ck.manifest["schedule"])
        vocab = ConceptVocabulary.from_dict(ck.manifest["vocabulary"])
    except (KeyError, TypeError) as err:
        raise ArtifactError(f"{path}: incomplete diffusion manifest ({err})") from None
    return MlpDenoiser(net, layout), schedule, vocab, ck


def save_bc(path, model: B.BcModel, provenance: dict) -> str:
    manifest = {"widths": list(model.net.widths), "cond": model.cond, "s0": model.s0, "state": model.state,
                "out_scale": model.out_scale, "provenance": provenance}
    return save_checkpoint(path, Checkpoint("bc", manifest, dict(model.net.params)))


def load_bc(path) -> B.BcModel:
    ck = load_checkpoint(path, "bc")
    m = ck.manifest
    return B.BcModel(Mlp(tuple(m["widths"]), ck.tensors).with_params(ck.tensors), m["cond"], m["s0"],
                     m["state"], m["out_scale"])


def save_cvae(path, model: B.CvaeModel, provenance: dict) -> str:
    manifest = {"enc": list(model.enc.widths), "dec": list(model.dec.widths), "latent": model.latent,
                "s0": model.s0, "sigma": model.sigma, "provenance": provenance}
    tensors = {**prefixed("enc", model.enc.params), **prefixed("dec", model.dec.params)}
    return save_checkpoint(path, Checkpoint("cvae", manifest, tensors))


def load_cvae(path) -> B.CvaeModel:
    ck = load_checkpoint(path, "cvae")
    m = ck.manifest
    enc, dec = unprefixed("enc", ck.tensors), unprefixed("dec", ck.tensors)
    return B.CvaeModel(Mlp(tuple(m["enc"]), enc).with_params(enc), Mlp(tuple(m["dec"]), dec).with_params(dec),
                       m["latent"], m["s0"], m["sigma"])


# --------------------------------------------------------------------------
# session
# --------------------------------------------------------------------------


class Session:
    """One domain's artifacts under one workspace, created lazily and cached on disk."""

    def __init__(self, domain: str, cfg: Config, ws: Workspace):
        self.cfg = cfg
        self.ws = ws
        self.dom = build_domain(domain, cfg)
        self.name = domain
        self.rng = Rng(cfg.get("run", "seed")).child(domain)
        self._model = None
        self._demos: dict[str, list[DatasetRecord]] = {}
        self._inv: dict[tuple, InversionResult] = {}
        self._bc = None
        self._cvae = None
        self._train_cache = None

    # data -----------------------------------------------------------------
    def gen_data(self) -> dict:
        t0 = time.perf_counter()
        counts, digests = {}, {}
        widths = (self.dom.state_width, self.dom.s0_width or None)
        train = self.dom.gen_training(self.rng.child("data"))
        for lab, recs in train.items():
            path = self.ws.training_file(self.name, lab)
            digests[self.ws.rel(path)] = write_jsonl(path, recs, widths)
            counts[lab] = len(recs)
        demo_counts = {}
        for lab in self.dom.demo_labels:
            recs = self.dom.gen_demos(lab, self.rng.child("demos", lab))
            path = self.ws.demo_file(self.name, lab)
            digests[self.ws.rel(path)] = write_jsonl(path, recs, widths)
            demo_counts[lab] = len(recs)
        manifest = {"domain": self.name, "seed": self.cfg.get("run", "seed"), "training_counts": counts,
                    "training_total": sum(counts.values()), "demo_counts": demo_counts, "digests": digests,
                    "layout": {"state": self.dom.state_width, "s0": self.dom.s0_width}}
        write_json(self.ws.manifest(self.name), manifest)
        log.info("%s: generated %d training records in %.1fs", self.name, sum(counts.values()),
                 time.perf_counter() - t0)
        return manifest

    def _ensure_data(self) -> None:
        if not self.ws.manifest(self.name).exists():
            self.gen_data()

    def training_data(self) -> dict[str, list[DatasetRecord]]:
        self._ensure_data()
        widths = (self.dom.state_width, self.dom.s0_width or None)
        return {lab: read_jsonl(self.ws.training_file(self.name, lab), widths) for lab in self.dom.training_labels}

    def demos(self, label: str) -> list[DatasetRecord]:
        if label not in self._demos:
            self._ensure_data()
            path = self.ws.demo_file(self.name, label)
            if not path.exists():
                raise ArtifactError(f"no demonstrations for {label!r} at {path}")
            self._demos[label] = read_jsonl(path, (self.dom.state_width, self.dom.s0_width or None))
        return self._demos[label]

    def dataset_digest(self) -> str:
        self._ensure_data()
        return file_digest(self.ws.manifest(self.name))

    # model ----------------------------------------------------------------
    def vocab(self) -> ConceptVocabulary:
        return ConceptVocabulary(self.dom.training_labels, self.dom.sec["vocab_seed"])

    def schedule(self) -> DiffusionSchedule:
        d = self.cfg["diffusion"]
        return DiffusionSchedule(d["T"], d["beta_start"], d["beta_end"])

    def train(self) -> MlpDenoiser:
        d = self.cfg["diffusion"]
        vocab = self.vocab()
        X, C, S = self.dom.training_arrays(self.training_data(), vocab)
        layout = InputLayout(self.dom.x_width, vocab.dim, self.dom.s0_width, d["time_dim"])
        model = MlpDenoiser.init(layout, self.cfg.hidden(), self.rng.child("init"))
        t0 = time.perf_counter()
        model, losses = train_denoiser(model, self.schedule(), X, C, S, vocab.null,
                                       steps=self.dom.sec["train_steps"], batch_size=d["batch_size"],
                                       lr=self.dom.sec["lr"], p_drop=d["p_drop"], rng=self.rng.child("train"),
                                       weight_decay=d["weight_decay"], warmup=d["warmup"])
        log.info("%s: trained denoiser in %.1fs (final loss %.4f)", self.name, time.perf_counter() - t0,
                 float(np.mean(losses[-100:])))
        prov = {"seed": self.cfg.get("run", "seed"), "dataset_digest": self.dataset_digest(),
                "config": portable_config(self.cfg), "final_loss": float(np.mean(losses[-100:]))}
        save_denoiser(self.ws.checkpoint(self.name), model, self.schedule(), vocab, prov)
        self._model = load_denoiser(self.ws.checkpoint(self.name))
        return model

    def model(self):
        """(denoiser, schedule, vocabulary, checkpoint); trains if no checkpoint exists."""
        if self._model is None:
            path = self.ws.checkpoint(self.name)
            if not path.exists():
                self.train()
            else:
                self._model = load_denoiser(path)
        return self._model

    # inversion ------------------------------------------------------------
    def inversion_options(self, k: int, omega) -> InversionOptions:
        inv = self.cfg["inversion"]
        return InversionOptions(k=k, steps=inv["steps"], lr=inv["lr"], draws_per_demo=inv["draws_per_demo"],
                                omega=omega, weight_decay=inv["weight_decay"])

    def inversion(self, label: str, k: int, omega, refresh: bool = False) -> InversionResult:
        omega = parse_omega(omega)
        key = (label, k, omega_tag(omega))
        if key in self._inv and not refresh:
            return self._inv[key]
        path = self.ws.inversion(self.name, label, k, omega)
        model, schedule, vocab, ck = self.model()
        if path.exists() and not refresh:
            res = InversionResult.from_json(json.loads(path.read_text()))
            if res.config.get("model_digest") != freeze_guard(model):
                log.info("stale inversion %s (different model); recomputing", path)
            else:
                self._inv[key] = res
                return res
        X, S = self.dom.demo_arrays(self.demos(label))
        t0 = time.perf_counter()
        res = invert(model, schedule, vocab.null, X, S, self.inversion_options(k, omega),
                     self.rng.child("invert", label, k, omega_tag(omega)))
        log.info("%s: inverted %r (K=%d, omega=%s) in %.1fs, loss %.4f", self.name, label, k,
                 omega_tag(omega), time.perf_counter() - t0, float(np.mean(res.loss_trace[-100:])))
        res.config.update(label=label, checkpoint_digest=ck.digest, demos=self.ws.rel(self.ws.demo_file(self.name, label)))
        write_json(path, res.to_json())
        self._inv[key] = res
        return res

    # generation -----------------------------------------------------------
    def spec(self, setting: str, label: str, k: int, omega) -> CompositionSpec:
        """Composition used to generate ``label`` in ``setting``."""
        _, _, vocab, _ = self.model()
        alpha = self.cfg.get("diffusion", "alpha")
        if setting == "training":
            return CompositionSpec.of([vocab[label]], [self.dom.sec["train_omega"]], vocab.null, alpha)
        omega = parse_omega(omega)
        res = self.inversion(self.dom.demo_label(setting, label), k, omega)
        spec = res.spec(vocab.null, alpha)
        if setting == "new-training":
            partner = label[len(R.NEW_TRAINING_BASE) + len(" and "):]
            spec = spec.plus(vocab[partner], 1.0 if omega == "learned" else float(omega))
        return spec

    def generate(self, spec: CompositionSpec, ctx: EvalContext, rng: Rng) -> np.ndarray:
        model, schedule, _, _ = self.model()
        s0 = None if ctx.s0 is None else N.encode_s0(ctx.s0)
        return sample(model, schedule, spec, s0, rng, n=ctx.n)

    def evaluate(self, setting: str, k: int = 2, omega=None, n: int | None = None) -> Summary:
        if setting not in self.dom.settings:
            raise ConfigError(f"setting {setting!r} not defined for {self.name}; "
                              f"choose from {sorted(self.dom.settings)}")
        omega = self.dom.sec["omega"] if omega is None else omega
        n = self.dom.sec["eval_n"] if n is None else n
        stream = self.rng.child("eval", setting, k, omega_tag(parse_omega(omega)))

        def gen(label, count, rng):
            demos = self.demos(self.dom.demo_label(setting, label)) if setting == "composition" else None
            ctx = self.dom.context(setting, label, count, self.rng.child("context", setting), demos)
            return ctx, self.generate(self.spec(setting, label, k, omega), ctx, rng)

        def score(label, out):
            ctx, x = out
            return self.dom.score(label, x, ctx)

        if setting == "composition" and self.name == "nav2d":
            # one sample per demonstrated initial state
            n = self.dom.sec["demos"]
        return accuracy(self.dom.settings[setting], gen, score, n, stream)

    # nav2d closed loop ----------------------------------------------------
    def closed_loop(self, k: int = 2, omega=None, replan_every: int | None = None, n: int | None = None) -> list[dict]:
        """Success of closed-loop (replanning) and open-loop execution on new initial states."""
        if self.name != "nav2d":
            raise ConfigError("closed-loop rollouts exist only for nav2d")
        model, schedule, _, _ = self.model()
        sec = self.dom.sec
        omega = sec["omega"] if omega is None else omega
        replan_every = sec["replan_every"] if replan_every is None else replan_every
        n = sec["rollout_n"] if n is None else n
        rows = []
        for label in N.NEW_TASKS:
            spec = self.spec("new-initial-state", label, k, omega)
            ctx = self.dom.context("new-initial-state", label, n, self.rng.child("context", "rollout"), None)
            row = {"task": label}
            for mode, every in (("closed", replan_every), ("open", sec["max_steps"])):
                out = N.closed_loop_rollout(model, schedule, spec, ctx.s0, ctx.target,
                                            self.rng.child("rollout", label, mode, k, omega_tag(parse_omega(omega))),
                                            replan_every=every, max_steps=sec["max_steps"],
                                            lookahead=sec["lookahead"])
                row[f"{mode}_success"] = float(out.success.mean())
                row[f"{mode}_distractor"] = float(np.mean([s == N.REACHED_DISTRACTOR for s in out.status]))
                row[f"{mode}_timeout"] = float(np.mean([s == N.TIMEOUT for s in out.status]))
            rows.append(row)
        return rows

    # baselines ------------------------------------------------------------
    def bc(self) -> B.BcModel:
        if self._bc is None:
            path = self.ws.checkpoint(self.name, "bc")
            if path.exists():
                self._bc = load_bc(path)
            else:
                self._bc = self._train_bc()
                save_bc(path, self._bc, {"seed": self.cfg.get("run", "seed"), "dataset_digest": self.dataset_digest()})
        return self._bc

    def _train_bc(self) -> B.BcModel:
        b = self.cfg["baselines"]
        vocab = self.vocab()
        data = self.training_data()
        rng = self.rng.child("bc")
        if self.name == "nav2d":
            trajs, s0s, conds = [], [], []
            for lab, recs in data.items():
                for r in recs:
                    trajs.append(N.encode_traj(r.traj).reshape(N.H, 2))
                    s0s.append(N.encode_s0(r.s0))
                    conds.append(vocab[lab])
            trajs, s0s = np.array(trajs), np.array(s0s)
            s0r, cur, nxt = B.transitions(trajs, s0s)
            cond = np.repeat(np.array(conds), N.H - 1, axis=0)
            model = B.BcModel.init(vocab.dim, N.S0_WIDTH, 2, 2, b["bc_hidden"], rng.child("init"),
                                   out_scale=N.V_MAX / 2.5)
            model, _ = B.bc_train(model, cond, s0r, cur, nxt, steps=b["bc_steps"], batch_size=b["bc_batch_size"],
                                  lr=b["bc_lr"], rng=rng.child("train"))
        else:
            X, C, _ = self.dom.training_arrays(data, vocab)
            model = B.BcModel.init(vocab.dim, 0, 0, self.dom.x_width, b["bc_hidden"], rng.child("init"))
            model, _ = B.bc_train(model, C, None, None, X, steps=b["bc_steps"], batch_size=b["bc_batch_size"],
                                  lr=b["bc_lr"], rng=rng.child("train"))
        return model

    def cvae(self) -> B.CvaeModel:
        if self._cvae is None:
            path = self.ws.checkpoint(self.name, "cvae")
            if path.exists():
                self._cvae = load_cvae(path)
            else:
                self._cvae = self._train_cvae()
                save_cvae(path, self._cvae, {"seed": self.cfg.get("run", "seed"),
                                             "dataset_digest": self.dataset_digest()})
        return self._cvae

    def _train_cvae(self) -> B.CvaeModel:
        b = self.cfg["baselines"]
        rng = self.rng.child("cvae")
        data = self.training_data()
        if self.name == "nav2d":
            recs = [r for rs in data.values() for r in rs]
            X = N.encode_traj(np.stack([r.traj for r in recs]))
            S = N.encode_s0(np.stack([r.s0 for r in recs]))
        else:
            X, _, S = self.dom.training_arrays(data, self.vocab())
        model = B.CvaeModel.init(self.dom.x_width, self.dom.s0_width, b["cvae_latent"], b["cvae_hidden"],
                                 b["cvae_sigma"], rng.child("init"))
        model, hist = B.cvae_train(model, X, S, steps=b["cvae_steps"], batch_size=b["bc_batch_size"],
                                   lr=b["cvae_lr"], rng=rng.child("train"), kl_weight=b["cvae_kl_weight"])
        return model

    def baseline_condition(self, method: str, label: str) -> np.ndarray:
        """Learned BC condition or VAE latent for a new task's demonstrations."""
        b = self.cfg["baselines"]
        demos = self.demos(label)
        X, S = self.dom.demo_arrays(demos)
        rng = self.rng.child(method, "invert", label)
        if method == "bc":
            model = self.bc()
            if self.name == "nav2d":
                s0r, cur, nxt = B.transitions(X.reshape(len(demos), N.H, 2), S)
                c, _ = B.bc_invert_condition(model, s0r, cur, nxt, steps=b["invert_steps"], lr=b["invert_lr"], rng=rng)
            else:
                c, _ = B.bc_invert_condition(model, None, None, X, steps=b["invert_steps"], lr=b["invert_lr"], rng=rng)
            return c
        z, _ = B.cvae_invert_latent(self.cvae(), X, S, steps=b["invert_steps"], lr=b["invert_lr"], rng=rng)
        return z

    def baseline_generate(self, method: str, cond: np.ndarray, ctx: EvalContext, rng: Rng) -> np.ndarray:
        b = self.cfg["baselines"]
        if method == "bc":
            model = self.bc()
            if self.name == "nav2d":
                s0 = N.encode_s0(ctx.s0)
                return B.bc_rollout(model, cond, s0, s0[:, :2], N.H).reshape(ctx.n, -1)
            return B.bc_generate(model, cond, ctx.n, b["bc_eval_noise"], rng)
        s0 = None if ctx.s0 is None else N.encode_s0(ctx.s0)
        return B.cvae_generate(self.cvae(), cond, s0, ctx.n, b["cvae_gen_noise"], rng)

    def evaluate_baseline(self, method: str, setting: str, n: int | None = None) -> Summary:
        """Baseline accuracy scored exactly like :meth:`evaluate` (same states, same predicate)."""
        if method not in ("bc", "vae"):
            raise ConfigError(f"unknown baseline {method!r}")
        n = self.dom.sec["eval_n"] if n is None else n
        vocab = self.vocab()
        stream = self.rng.child("eval-baseline", method, setting)

        def condition(label):
            if setting == "training":
                if method == "bc":
                    return vocab[label]
                # the encoder of one real trajectory of the concept supplies z
                rec = self.training_data_cached()[label][0]
                X, S = self.dom.demo_arrays([rec])
                return self.cvae().encode(X, S)[0][0]
            if setting == "new-training":
                if method != "bc":
                    raise ConfigError("the VAE baseline has no way to compose concepts")
                partner = label[len(R.NEW_TRAINING_BASE) + len(" and "):]
                return self.baseline_condition("bc", R.NEW_TRAINING_BASE) + vocab[partner]
            return self.baseline_condition(method, self.dom.demo_label(setting, label))

        def gen(label, count, rng):
            demos = self.demos(label) if setting == "composition" else None
            ctx = self.dom.context(setting, label, count, self.rng.child("context", setting), demos)
            return ctx, self.baseline_generate(method, condition(label), ctx, rng)

        def score(label, out):
            ctx, x = out
            return self.dom.score(label, x, ctx)

        if setting == "composition" and self.name == "nav2d":
            n = self.dom.sec["demos"]
        return accuracy(self.dom.settings[setting], gen, score, n, stream)

    def training_data_cached(self):
        if self._train_cache is None:
            self._train_cache = self.training_data()
        return self._train_cache


# --------------------------------------------------------------------------
# reference recipe
# --------------------------------------------------------------------------


def _summary_rows(setting: str, k, omega, s: Summary, method: str = "diffusion") -> list[dict]:
    rows = [{"method": method, "setting": setting, "k": k, "omega": omega_tag(omega) if omega is not None else "",
             "task": label, "accuracy": acc} for label, acc in s.per_task.items()]
    rows.append({"method": method, "setting": setting, "k": k, "omega": omega_tag(omega) if omega is not None else "",
                 "task": "MEAN", "accuracy": s.mean, "sem": s.sem})
    return rows


TASK_COLUMNS = ("method", "setting", "k", "omega", "task", "accuracy", "sem")


def rearrangement_reports(sess: Session) -> dict:
    out = sess.ws.reports
    sec = sess.dom.sec
    omega = sec["omega"]
    results = {}

    train = sess.evaluate("training")
    write_csv(out / "rearrangement_training.csv", _summary_rows("training", "", None, train), TASK_COLUMNS)
    results["training"] = train.to_dict()

    rows, ablation = [], []
    for setting in ("composition", "new-concept", "new-training"):
        for k in (1, 2):
            s = sess.evaluate(setting, k, omega)
            rows += _summary_rows(setting, k, omega, s)
            ablation.append({"setting": setting, "k": k, "omega": omega_tag(omega), "mean": s.mean, "sem": s.sem})
            results[f"{setting}/k{k}"] = s.to_dict()
    diag = [results["new-concept/k2"]["per_task"][t] for t in R.DIAGONAL_TASKS]
    m, se = mean_sem(diag)
    ablation.append({"setting": "new-concept (diagonal tasks)", "k": 2, "omega": omega_tag(omega), "mean": m, "sem": se})
    results["diagonal/k2"] = {"mean": m, "sem": se}
    write_csv(out / "rearrangement_tasks.csv", rows, TASK_COLUMNS)
    write_csv(out / "rearrangement_ablation.csv", ablation, ("setting", "k", "omega", "mean", "sem"))

    sweep = omega_sweep(lambda w: sess.evaluate("new-training", 2, w), (*FIXED_OMEGA_GRID, "learned"))
    write_csv(out / "rearrangement_omega_sweep.csv", [{"setting": "new-training", **r} for r in sweep],
              ("setting", "omega", "mean", "sem", "tasks", "n"))
    results["omega_sweep"] = sweep

    model, schedule, vocab, _ = sess.model()
    line = R.COMPOSITION_TASKS[-1]
    res = sess.inversion(line, 2, omega)
    parts = [a.label() for a in R.parse_label(line)]
    comp = component_analysis(model, schedule, res, vocab.null, parts, lambda lab, x: R.eval_rearrangement(x, lab),
                              R.decode, sec["eval_n"], sess.rng.child("components", line),
                              temperature=sess.cfg.get("diffusion", "alpha"))
    write_csv(out / "rearrangement_components.csv", [{"task": line, **r} for r in comp],
              ("task", "component", "weight", *parts))
    results["components"] = {"task": line, "constituents": parts, "rows": comp,
                             "specialised": specialised_component(comp, parts)}

    learned = {}
    for lab in R.COMPOSITION_TASKS + R.NEW_CONCEPT_TASKS:
        r2 = sess.inversion(lab, 2, omega)
        for i, c in enumerate(r2.components):
            learned[f"{lab} [{i}]"] = c
    write_csv(out / "rearrangement_pca.csv", pca_export(vocab.labels, vocab.matrix(), learned),
              ("name", "kind", "pc1", "pc2", "nearest", "distance"))

    cmp_rows = []
    for setting in ("training", "composition", "new-concept", "new-training"):
        cmp_rows.append({"method": "diffusion", "setting": setting,
                         **_mean_sem_dict(results["training"] if setting == "training" else results[f"{setting}/k2"])})
        for method in ("bc", "vae"):
            if method == "vae" and setting == "new-training":
                continue
            s = sess.evaluate_baseline(method, setting)
            cmp_rows.append({"method": method, "setting": setting, "mean": s.mean, "sem": s.sem})
    write_csv(out / "rearrangement_compare.csv", cmp_rows, ("method", "setting", "mean", "sem"))
    results["compare"] = cmp_rows
    return results


def _mean_sem_dict(d: dict) -> dict:
    return {"mean": d["mean"], "sem": d["sem"]}


def nav2d_reports(sess: Session) -> dict:
    out = sess.ws.reports
    sec = sess.dom.sec
    omega = sec["omega"]
    results = {}
    train = sess.evaluate("training")
    results["training"] = train.to_dict()
    rows = _summary_rows("training", "", None, train)
    ablation = []
    for setting in ("composition", "new-initial-state"):
        for k in (1, 2):
            s = sess.evaluate(setting, k, omega)
            rows += _summary_rows(setting, k, omega, s)
            ablation.append({"setting": setting, "k": k, "omega": omega_tag(omega), "mean": s.mean, "sem": s.sem})
            results[f"{setting}/k{k}"] = s.to_dict()
    write_csv(out / "nav2d_tasks.csv", rows, TASK_COLUMNS)
    write_csv(out / "nav2d_ablation.csv", ablation, ("setting", "k", "omega", "mean", "sem"))

    loop = sess.closed_loop(2, omega)
    write_csv(out / "nav2d_closed_loop.csv", loop)
    results["closed_loop"] = {"rows": loop, "replan_every": sec["replan_every"],
                              "closed": float(np.mean([r["closed_success"] for r in loop])),
                              "open": float(np.mean([r["open_success"] for r in loop]))}

    cmp_rows = []
    for setting in ("training", "composition", "new-initial-state"):
        key = "training" if setting == "training" else f"{setting}/k2"
        cmp_rows.append({"method": "diffusion", "setting": setting, **_mean_sem_dict(results[key])})
        for method in ("bc", "vae"):
            s = sess.evaluate_baseline(method, setting)
            cmp_rows.append({"method": method, "setting": setting, "mean": s.mean, "sem": s.sem})
            results[f"{method}/{setting}"] = s.to_dict()
    write_csv(out / "nav2d_compare.csv", cmp_rows, ("method", "setting", "mean", "sem"))
    results["compare"] = cmp_rows
    return results


def reference_recipe(cfg: Config, root, domains: Sequence[str] = ("rearrangement", "nav2d")) -> dict:
    """Run the full experiment for ``domains`` under ``root``; returns the summary dict."""
    ws = Workspace(root)
    summary = {"seed": cfg.get("run", "seed"), "config": portable_config(cfg), "domains": {}}
    timings = {}
    for name in domains:
        t0 = time.perf_counter()
        sess = Session(name, cfg, ws)
        sess.gen_data()
        sess.train()
        results = (rearrangement_reports if name == "rearrangement" else nav2d_reports)(sess)
        _, _, _, ck = sess.model()
        summary["domains"][name] = {
            "checkpoint_digest": ck.digest,
            "dataset_digest": sess.dataset_digest(),
            "bc_digest": sess.bc().digest(),
            "vae_digest": sess.cvae().digest(),
            "results": results,
        }
        timings[name] = time.perf_counter() - t0
        log.info("%s recipe finished in %.0fs", name, timings[name])
    reports = sorted(p for p in ws.reports.glob("*.csv"))
    summary["reports"] = {ws.rel(p): file_digest(p) for p in reports}
    write_json(ws.reports / "summary.json", summary)
    write_json(ws.root / "timings.json", timings)
    return summary
