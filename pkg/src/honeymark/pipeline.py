"""Staged experiment runner.

Stages and the artifacts they leave under the output directory::

    split/           dataset.json (+.f64), split.json
    proxies/         proxy_a.ckpt, proxy_b.ckpt
    hardness/        hardness.csv, selection.json
    honey/           rest_model.ckpt, honey.json, honey_pixels.json (+.f64), trace.csv
    pairs/           pair<i>/{compliant,infringing,badnets}.ckpt, calibration<j>.ckpt,
                     mi_ref<j>.ckpt, baselines.json
    verify/          thresholds.json, <method>/pair<i>_<role>.csv, *_responses.csv,
                     <method>/pair<i>_integrity.csv
    report/          metrics_<method>.json, per_pair.csv, summary.csv

Each stage directory carries PROVENANCE.json with the config hash, master
seed, a stage key chaining the upstream keys, and the sha256 of every file
it wrote. A stage whose key and file hashes still match is skipped.

Seeds are derived from the master seed with ``derive_seed`` under these
paths: ("data"), ("split"), ("hardness"), ("honey"),
("pair", i, "compliant" | "infringing" | "badnets"), ("calibration", j),
("mi", "draw"), ("mi", "ref"), ("badnets", "poison"), ("badnets", "probes").
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import diffnet
from .baselines import (
    MIConfig,
    TriggerConfig,
    apply_trigger,
    badnets_poison,
    badnets_verify,
    choose_poison_ids,
    mi_loss_scores,
    train_out_references,
)
from .config import ExperimentConfig
from .datasets import (
    Dataset,
    ImageSample,
    SplitPlan,
    concat,
    generate_synthetic,
    load_idx,
    load_manifest,
    load_png_dir,
    make_split,
    save_manifest,
)
from .diffnet import load_checkpoint, sample_losses, save_checkpoint, train
from .errors import DependencyError, HoneymarkError, RejectedInput
from .hardness import read_hardness_csv, score_with_proxies, select_top_n, train_fold_proxies, write_hardness_csv
from .honeygen import HoneyGenConfig, HoneyRecord, HoneySet, generate_honey
from .metrics import auroc_from_scores, stealthiness, summary, tpr_tnr
from .seeding import derive_seed
from .verifier import (
    ClassifierAdapter,
    ReplayAdapter,
    VerificationDecision,
    VerificationReport,
    calibrate_threshold,
    nearest_rank,
    read_report_csv,
    verify,
)

log = logging.getLogger("honeymark")

STAGES = ("split", "train-proxies", "score-hardness", "generate-honey", "train-pair", "verify", "report")
STAGE_DIRS = {
    "split": "split",
    "train-proxies": "proxies",
    "score-hardness": "hardness",
    "generate-honey": "honey",
    "train-pair": "pairs",
    "verify": "verify",
    "report": "report",
}
# config sections each stage depends on, beyond its upstream stage
STAGE_SECTIONS = {
    "split": ("seed", "dataset", "split"),
    "train-proxies": ("proxy", "hardness"),
    "score-hardness": ("honey",),
    "generate-honey": ("proxy", "honey"),
    "train-pair": ("proxy", "suspicious", "num_model_pairs", "methods", "baselines", "verification"),
    "verify": ("verification", "methods", "metrics", "baselines"),
    "report": ("methods", "metrics"),
}
ROLES = ("compliant", "infringing")


class LockedError(HoneymarkError):
    exit_code = 2


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


class RecordingAdapter:
    """Pass queries through to a black-box model and keep every response."""

    def __init__(self, inner):
        self.inner = inner
        self.tag = inner.tag
        self.responses: dict[str, np.ndarray] = {}

    @property
    def query_count(self):
        return self.inner.query_count

    def query(self, sample: ImageSample) -> np.ndarray:
        p = self.inner.query(sample)
        self.responses[sample.id] = np.asarray(p, dtype=np.float64)
        return p

    def write_csv(self, path) -> Path:
        k = len(next(iter(self.responses.values()))) if self.responses else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", *[f"p_{i}" for i in range(k)]])
            for sid, p in self.responses.items():
                w.writerow([sid, *[repr(float(v)) for v in p]])
        return Path(path)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self._cache = {}

    # -- bookkeeping ----------------------------------------------------------

    def dir(self, stage) -> Path:
        return self.out / STAGE_DIRS[stage]

    def _provenance(self, stage) -> dict | None:
        p = self.dir(stage) / "PROVENANCE.json"
        return json.loads(p.read_text()) if p.is_file() else None

    def stage_key(self, stage) -> str:
        idx = STAGES.index(stage)
        upstream = ""
        if idx > 0:
            prev = STAGES[idx - 1]
            prov = self._provenance(prev)
            if prov is None:
                raise DependencyError(self.dir(prev) / "PROVENANCE.json", prev)
            upstream = prov["key"]
        material = json.dumps(
            {"stage": stage, "upstream": upstream, "sections": self.cfg.section_hash(*STAGE_SECTIONS[stage])},
            sort_keys=True,
        )
        return hashlib.sha256(material.encode()).hexdigest()

    def is_fresh(self, stage) -> bool:
        prov = self._provenance(stage)
        if prov is None or prov.get("key") != self.stage_key(stage):
            return False
        base = self.dir(stage)
        for rel, digest in prov["files"].items():
            f = base / rel
            if not f.is_file() or sha256_file(f) != digest:
                return False
        return True

    def _finish(self, stage, files):
        base = self.dir(stage)
        doc = {
            "stage": stage,
            "key": self.stage_key(stage),
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "files": {str(Path(f).relative_to(base)): sha256_file(f) for f in sorted(map(str, files))},
        }
        write_json(base / "PROVENANCE.json", doc)

    def _stamp(self) -> dict:
        return {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed}

    def _require(self, path, stage) -> Path:
        path = Path(path)
        if not path.exists():
            raise DependencyError(path, stage)
        return path

    def run_stage(self, stage, force=False, **kwargs):
        if stage not in STAGES:
            raise RejectedInput(f"unknown stage {stage!r}")
        if not force and not kwargs and self.is_fresh(stage):
            log.info("stage %s up to date, skipping", stage)
            return
        self.dir(stage).mkdir(parents=True, exist_ok=True)
        log.info("stage %s", stage)
        files = getattr(self, "_stage_" + stage.replace("-", "_"))(**kwargs)
        self._finish(stage, files)

    def run_all(self, force=False):
        for stage in STAGES:
            self.run_stage(stage, force=force)
        return self.dir("report") / "summary.csv"

    # -- loaders for upstream artifacts --------------------------------------

    def dataset(self) -> Dataset:
        if "data" not in self._cache:
            self._cache["data"] = load_manifest(self._require(self.dir("split") / "dataset.json", "split"))
        return self._cache["data"]

    def plan(self) -> SplitPlan:
        doc = json.loads(self._require(self.dir("split") / "split.json", "split").read_text())
        return SplitPlan.from_json(doc["plan"])

    def _arch(self, section):
        d = self.dataset()
        return self.cfg.arch(section, d.shape, d.num_classes)

    def _ckpt(self, stage, name):
        return load_checkpoint(self._require(self.dir(stage) / name, stage))

    def honey(self) -> HoneySet:
        if "honey" in self._cache:
            return self._cache["honey"]
        base = self.dir("generate-honey")
        doc = json.loads(self._require(base / "honey.json", "generate-honey").read_text())
        pixels = load_manifest(self._require(base / "honey_pixels.json", "generate-honey"))
        data = self.dataset()
        records = tuple(
            HoneyRecord(r["sample_id"], data[r["sample_id"]], pixels[r["sample_id"]], tuple(r["delta_loss_trace"]))
            for r in doc["records"]
        )
        rest = load_checkpoint(base / doc["rest_model_checkpoint"])
        hs = HoneySet(records, rest, HoneyGenConfig.from_json(doc["config"]), doc["rest_model_checkpoint"])
        self._cache["honey"] = hs
        return hs

    def baselines_doc(self) -> dict:
        return json.loads(self._require(self.dir("train-pair") / "baselines.json", "train-pair").read_text())

    def trigger(self) -> TriggerConfig:
        b = self.cfg.doc["baselines"]
        return TriggerConfig(b["patch_size"], b["patch_value"], "bottom_right", b["target_label"], tuple(self.baselines_doc()["poison_ids"]))

    # -- stages ---------------------------------------------------------------

    def _load_source(self) -> Dataset:
        src = self.cfg.doc["dataset"]
        if "synthetic" in src:
            spec = dict(src["synthetic"])
            seed = spec.pop("seed", derive_seed(self.cfg.seed, "data"))
            return generate_synthetic(spec, seed)
        if "idx" in src:
            return load_idx(self.cfg.resolve(src["idx"]["images"]), self.cfg.resolve(src["idx"]["labels"]))
        return load_png_dir(self.cfg.resolve(src["png_dir"]))

    def _stage_split(self):
        data = self._load_source()
        s = self.cfg.doc["split"]
        plan = make_split(data, s["public_fraction"], s["verification_fraction"], derive_seed(self.cfg.seed, "split"))
        base = self.dir("split")
        manifest = save_manifest(data, base / "dataset.json", self._stamp())
        self._cache["data"] = data
        split = write_json(base / "split.json", {**self._stamp(), "plan": plan.to_json()})
        return [manifest, manifest.with_suffix(".f64"), split]

    def _stage_train_proxies(self):
        data, plan = self.dataset(), self.plan()
        cfg = self.cfg.train_config("hardness").with_seed(derive_seed(self.cfg.seed, "hardness"))
        proxy_a, proxy_b = train_fold_proxies(data, plan, self._arch("hardness"), cfg)
        base = self.dir("train-proxies")
        return [save_checkpoint(proxy_a, base / "proxy_a.ckpt"), save_checkpoint(proxy_b, base / "proxy_b.ckpt")]

    def _stage_score_hardness(self):
        data, plan = self.dataset(), self.plan()
        records = score_with_proxies(data, plan, self._ckpt("train-proxies", "proxy_a.ckpt"), self._ckpt("train-proxies", "proxy_b.ckpt"))
        n = self.cfg.doc["honey"].get("num_honey") or plan.verification_budget
        sel = select_top_n(records, n)
        base = self.dir("score-hardness")
        return [
            write_hardness_csv(records, base / "hardness.csv"),
            write_json(base / "selection.json", {**self._stamp(), "hard_ids": list(sel.hard_ids), "rest_ids": list(sel.rest_ids)}),
        ]

    def _stage_generate_honey(self):
        data = self.dataset()
        sel = json.loads(self._require(self.dir("score-hardness") / "selection.json", "score-hardness").read_text())
        hcfg = self.cfg.honey_config(derive_seed(self.cfg.seed, "honey"))
        hard = [data[i] for i in sel["hard_ids"]]
        rest = [data[i] for i in sel["rest_ids"]]

        def progress(t, delta, _pixels):
            log.info("honey iteration %d: mean differential loss %.4f", t, float(np.mean(delta)))

        hs = generate_honey(hard, rest, self._arch("proxy"), hcfg, on_iteration=progress)
        self._cache["honey"] = hs
        base = self.dir("generate-honey")
        ckpt = save_checkpoint(hs.rest_model, base / "rest_model.ckpt")
        pixels = save_manifest(Dataset(tuple(hs.honey_samples()), data.num_classes, "honey"), base / "honey_pixels.json", self._stamp())
        doc = {
            **self._stamp(),
            "config": hcfg.to_json(),
            "rest_model_checkpoint": ckpt.name,
            "pixel_manifest": pixels.name,
            "records": [
                {
                    "sample_id": r.sample_id,
                    "label": r.label,
                    "linf_offset_actual": r.linf_offset(),
                    "delta_loss_trace": list(r.delta_loss_trace),
                }
                for r in hs.records
            ],
        }
        honey_json = write_json(base / "honey.json", doc)
        trace = base / "trace.csv"
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "iteration", "delta_loss"])
            for r in hs.records:
                for t, d in enumerate(r.delta_loss_trace):
                    w.writerow([r.sample_id, t, repr(d)])
        return [ckpt, pixels, pixels.with_suffix(".f64"), honey_json, trace]

    def _stage_train_pair(self):
        data, plan, honey = self.dataset(), self.plan(), self.honey()
        seed = self.cfg.seed
        b = self.cfg.doc["baselines"]
        methods = self.cfg.methods
        public = data.subset(plan.public_ids, "public")
        private = data.subset(plan.private_ids, "private")
        infringing_data = concat([public, private.replace(honey.honey_samples())], "infringing")
        sus_arch, sus_cfg = self._arch("suspicious"), self.cfg.train_config("suspicious")
        own_arch, own_cfg = self._arch("proxy"), self.cfg.train_config("proxy")
        base = self.dir("train-pair")
        files = []

        honey_ids = set(honey.ids)
        candidates = [i for i in plan.private_ids if i not in honey_ids]
        draw = np.random.default_rng(derive_seed(seed, "mi", "draw")).choice(len(candidates), plan.verification_budget, replace=False)
        mi_ids = [candidates[i] for i in draw]
        poison_ids = choose_poison_ids(private, b["poison_rate"], b["target_label"], derive_seed(seed, "badnets", "poison"))
        order = np.random.default_rng(derive_seed(seed, "badnets", "probes")).permutation(len(poison_ids))
        probe_ids = [poison_ids[i] for i in order[: min(plan.verification_budget, len(poison_ids))]]
        doc = {**self._stamp(), "mi_ids": mi_ids, "poison_ids": list(poison_ids), "probe_ids": probe_ids}
        files.append(write_json(base / "baselines.json", doc))
        trigger = TriggerConfig(b["patch_size"], b["patch_value"], "bottom_right", b["target_label"], poison_ids)
        poisoned_data = concat([public, badnets_poison(private, trigger)], "badnets") if "badnets" in methods else None

        for i in range(self.cfg.num_model_pairs):
            pdir = base / f"pair{i}"
            pdir.mkdir(exist_ok=True)
            log.info("training model pair %d", i)
            comp = train(sus_arch, public, sus_cfg.with_seed(derive_seed(seed, "pair", i, "compliant")))
            inf = train(sus_arch, infringing_data, sus_cfg.with_seed(derive_seed(seed, "pair", i, "infringing")))
            files += [save_checkpoint(comp, pdir / "compliant.ckpt"), save_checkpoint(inf, pdir / "infringing.ckpt")]
            if poisoned_data is not None:
                bad = train(sus_arch, poisoned_data, sus_cfg.with_seed(derive_seed(seed, "pair", i, "badnets")))
                files.append(save_checkpoint(bad, pdir / "badnets.ckpt"))

        # owner-side reference models: proxy architecture, public data only
        for j in range(self.cfg.doc["verification"]["num_calibration_models"]):
            cal = train(own_arch, public, own_cfg.with_seed(derive_seed(seed, "calibration", j)))
            files.append(save_checkpoint(cal, base / f"calibration{j}.ckpt"))
        if "mi_loss" in methods:
            rest_pool = private.subset([i for i in plan.private_ids if i not in set(mi_ids)])
            mi_cfg = MIConfig(own_arch, own_cfg.with_seed(derive_seed(seed, "mi", "ref")), b["mi_reference_models"])
            for j, ref in enumerate(train_out_references(rest_pool, mi_cfg)):
                files.append(save_checkpoint(ref, base / f"mi_ref{j}.ckpt"))
        return files

    # -- verification ---------------------------------------------------------

    def _calibration_models(self):
        n = self.cfg.doc["verification"]["num_calibration_models"]
        return [self._ckpt("train-pair", f"calibration{j}.ckpt") for j in range(n)]

    def _mi_refs(self):
        n = self.cfg.doc["baselines"]["mi_reference_models"]
        return [self._ckpt("train-pair", f"mi_ref{j}.ckpt") for j in range(n)]

    def _mi_context(self):
        data, plan = self.dataset(), self.plan()
        mi_ids = self.baselines_doc()["mi_ids"]
        samples = [data[i] for i in mi_ids]
        rest_pool = data.subset([i for i in plan.private_ids if i not in set(mi_ids)])
        return samples, rest_pool

    def compute_thresholds(self) -> dict:
        fpr = self.cfg.doc["verification"]["target_fpr"]
        honey = self.honey()
        cals = self._calibration_models()
        out = {"target_fpr": fpr}
        if "honeyimage" in self.cfg.methods:
            out["honeyimage"] = calibrate_threshold(honey.rest_model, cals, honey, fpr)
        if "mi_loss" in self.cfg.methods:
            samples, rest_pool = self._mi_context()
            refs = self._mi_refs()
            gaps = []
            for c in cals:
                gaps += list(mi_loss_scores(samples, c, None, rest_pool, references=refs))
            out["mi_loss"] = nearest_rank(gaps, 1.0 - fpr)
        if "badnets" in self.cfg.methods:
            trigger = self.trigger()
            probes = [self.dataset()[i] for i in self.baselines_doc()["probe_ids"]]
            out["badnets_base_rate"] = float(np.mean([badnets_verify(c, probes, trigger).score for c in cals]))
        return out

    def _suspect(self, method, pair, role, replay):
        vdir = self.dir("verify") / method
        if replay:
            path = self._require(vdir / f"pair{pair}_{role}_responses.csv", "verify")
            return ReplayAdapter.from_csv(path, f"{method}/pair{pair}/{role}")
        name = "badnets.ckpt" if (method == "badnets" and role == "infringing") else f"{role}.ckpt"
        model = self._ckpt("train-pair", f"pair{pair}/{name}")
        return RecordingAdapter(ClassifierAdapter(model, f"{method}/pair{pair}/{role}"))

    def _stage_verify(self, replay=False):
        base = self.dir("verify")
        files = []
        if replay:
            thresholds = json.loads(self._require(base / "thresholds.json", "verify").read_text())
        else:
            thresholds = {**self._stamp(), **self.compute_thresholds()}
            files.append(write_json(base / "thresholds.json", thresholds))
        lam = self.cfg.doc["metrics"]["lambda"]
        kind = self.cfg.doc["metrics"]["distance_kind"]
        margin = self.cfg.doc["baselines"]["margin"]
        data = self.dataset()
        for method in self.cfg.methods:
            mdir = base / method
            mdir.mkdir(parents=True, exist_ok=True)
            model_verdicts = {}
            for i in range(self.cfg.num_model_pairs):
                responses = {}
                for role in ROLES:
                    sus = self._suspect(method, i, role, replay)
                    if method == "honeyimage":
                        honey = self.honey()
                        report = verify(honey, honey.rest_model, sus, thresholds["honeyimage"], sus.tag)
                        files.append(report.write_csv(mdir / f"pair{i}_{role}.csv"))
                    elif method == "mi_loss":
                        samples, rest_pool = self._mi_context()
                        scores = mi_loss_scores(samples, sus, None, rest_pool, references=self._mi_refs())
                        tau = thresholds["mi_loss"]
                        report = VerificationReport(
                            [VerificationDecision(s.id, float(g), tau, int(g > tau)) for s, g in zip(samples, scores)],
                            sus.tag, len(samples),
                        )
                        files.append(report.write_csv(mdir / f"pair{i}_{role}.csv"))
                    else:
                        trigger = self.trigger()
                        probes = [data[j] for j in self.baselines_doc()["probe_ids"]]
                        res = badnets_verify(sus, probes, trigger, thresholds["badnets_base_rate"], margin)
                        model_verdicts[f"pair{i}_{role}"] = {"score": res.score, "verdict": res.verdict, "threshold": res.threshold}
                        path = mdir / f"pair{i}_{role}.csv"
                        with open(path, "w", newline="") as fh:
                            w = csv.writer(fh)
                            w.writerow(["sample_id", "method", "score", "verdict"])
                            for p, prob in zip(probes, res.target_probs):
                                resp = sus.responses[p.id] if hasattr(sus, "responses") else sus.query(apply_trigger(p, trigger))
                                w.writerow([p.id, "badnets", repr(prob), int(np.argmax(resp) == trigger.target_label)])
                        files.append(path)
                    if isinstance(sus, RecordingAdapter):
                        files.append(sus.write_csv(mdir / f"pair{i}_{role}_responses.csv"))
                        responses[role] = sus.responses
                    else:
                        files.append(mdir / f"pair{i}_{role}_responses.csv")
                        responses[role] = sus.responses
                files += self._write_integrity(method, i, responses.get("infringing", {}), mdir, kind, lam)
            if model_verdicts:
                files.append(write_json(mdir / "model_verdicts.json", model_verdicts))
        if "honeyimage" in self.cfg.methods and not replay:
            for i in range(self.cfg.num_model_pairs):
                files.append(self._write_gap_comparison(i, base / "honeyimage"))
        return files

    def _write_gap_comparison(self, pair, mdir):
        """Compliant-minus-infringing loss on the honey images and on an equal-size random private sample."""
        data, plan, honey = self.dataset(), self.plan(), self.honey()
        honey_ids = set(honey.ids)
        pool = [i for i in plan.private_ids if i not in honey_ids]
        pick = np.random.default_rng(derive_seed(self.cfg.seed, "gap", "draw")).choice(len(pool), len(honey), replace=False)
        groups = [("honey", honey.honey_samples()), ("random", [data[pool[j]] for j in sorted(pick)])]
        comp = self._ckpt("train-pair", f"pair{pair}/compliant.ckpt")
        inf = self._ckpt("train-pair", f"pair{pair}/infringing.ckpt")
        path = mdir / f"pair{pair}_gaps.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "group", "compliant_loss", "infringing_loss", "gap"])
            for group, samples in groups:
                X = np.stack([s.pixels for s in samples])
                y = np.array([s.label for s in samples])
                lc, li = sample_losses(comp, X, y), sample_losses(inf, X, y)
                for s, a, b in zip(samples, lc, li):
                    w.writerow([s.id, group, repr(float(a)), repr(float(b)), repr(float(a - b))])
        return path

    def _write_integrity(self, method, pair, inf_responses, mdir, kind, lam):
        if method == "mi_loss":
            return []
        if method == "honeyimage":
            pairs = [(r.original, r.current) for r in self.honey().records]
        else:
            trigger = self.trigger()
            data = self.dataset()
            pairs = [(data[j], apply_trigger(data[j], trigger)) for j in self.baselines_doc()["probe_ids"]]
        path = mdir / f"pair{pair}_integrity.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "predicted", "stl"])
            for orig, mod in pairs:
                pred = int(np.argmax(inf_responses[orig.id]))
                w.writerow([orig.id, orig.label, pred, repr(stealthiness(orig, mod, kind, lam))])
        return [path]

    # -- report ---------------------------------------------------------------

    def _stage_report(self):
        vdir = self._require(self.dir("verify"), "verify")
        base = self.dir("report")
        lam = self.cfg.doc["metrics"]["lambda"]
        kind = self.cfg.doc["metrics"]["distance_kind"]
        files, summary_rows, pair_rows = [], [], []
        for method in self.cfg.methods:
            per_pair = []
            for i in range(self.cfg.num_model_pairs):
                scores, verdicts = {}, {}
                for role in ROLES:
                    path = self._require(vdir / method / f"pair{i}_{role}.csv", "verify")
                    scores[role], verdicts[role] = _read_scores(path)
                tpr, tnr = tpr_tnr(
                    verdicts["infringing"] + verdicts["compliant"],
                    [1] * len(verdicts["infringing"]) + [0] * len(verdicts["compliant"]),
                )
                row = {
                    "method": method,
                    "pair": i,
                    "tpr": tpr,
                    "tnr": tnr,
                    "auroc": auroc_from_scores(scores["infringing"], scores["compliant"]),
                    "hl": None,
                    "stl": None,
                    "n_pos": len(scores["infringing"]),
                    "n_neg": len(scores["compliant"]),
                }
                integ = vdir / method / f"pair{i}_integrity.csv"
                if integ.is_file():
                    with open(integ, newline="") as fh:
                        rows = list(csv.DictReader(fh))
                    row["hl"] = float(np.mean([int(r["predicted"]) == int(r["label"]) for r in rows]))
                    row["stl"] = float(np.mean([float(r["stl"]) for r in rows]))
                per_pair.append(row)
                pair_rows.append(row)
            mean = {k: _mean([r[k] for r in per_pair]) for k in ("tpr", "tnr", "auroc", "hl", "stl")}
            doc = {
                **self._stamp(),
                "method": method,
                "summary": summary(
                    mean["tpr"], mean["tnr"], mean["auroc"], mean["hl"], mean["stl"], kind, lam,
                    sum(r["n_pos"] for r in per_pair), sum(r["n_neg"] for r in per_pair), 0,
                ),
                "per_pair": per_pair,
            }
            if method == "honeyimage" and self.cfg.num_model_pairs >= 2:
                comp = [_read_scores(vdir / method / f"pair{i}_compliant.csv")[0] for i in range(self.cfg.num_model_pairs)]
                n = len(comp)
                doc["null_auroc"] = float(np.mean([auroc_from_scores(comp[i], comp[(i + 1) % n]) for i in range(n)]))
            gap_files = [vdir / method / f"pair{i}_gaps.csv" for i in range(self.cfg.num_model_pairs)]
            if method == "honeyimage" and all(f.is_file() for f in gap_files):
                doc["gap_medians"] = [_gap_medians(f) for f in gap_files]
            files.append(write_json(base / f"metrics_{method}.json", doc))
            summary_rows.append({"method": method, **mean, "n_pairs": len(per_pair)})
        files.append(_write_rows(base / "per_pair.csv", pair_rows, ["method", "pair", "tpr", "tnr", "auroc", "hl", "stl", "n_pos", "n_neg"]))
        files.append(_write_rows(base / "summary.csv", summary_rows, ["method", "tpr", "tnr", "auroc", "hl", "stl", "n_pairs"]))
        return files

    # -- ad hoc verification --------------------------------------------------

    def verify_checkpoint(self, checkpoint, tag=None) -> VerificationReport:
        """Verify one suspicious checkpoint against the honey set with the calibrated threshold."""
        model = load_checkpoint(self._require(checkpoint, "train-pair"))
        tfile = self.dir("verify") / "thresholds.json"
        if tfile.is_file() and "honeyimage" in json.loads(tfile.read_text()):
            tau = json.loads(tfile.read_text())["honeyimage"]
        else:
            tau = self.compute_thresholds()["honeyimage"]
        honey = self.honey()
        tag = tag or Path(checkpoint).stem
        report = verify(honey, honey.rest_model, ClassifierAdapter(model, tag), tau, tag)
        adhoc = self.dir("verify") / "adhoc"
        adhoc.mkdir(parents=True, exist_ok=True)
        report.write_csv(adhoc / f"{tag}.csv")
        report.write_summary(adhoc / f"{tag}.json")
        return report


def _read_scores(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = "loss_gap" if rows and "loss_gap" in rows[0] else "score"
    return [float(r[col]) for r in rows], [int(r["verdict"]) for r in rows]


def _gap_medians(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {g: float(np.median([float(r["gap"]) for r in rows if r["group"] == g])) for g in ("honey", "random")}
    out["ratio"] = out["honey"] / out["random"] if out["random"] > 0 else float("inf")
    return out


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_rows(path, rows, columns) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return Path(path)


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".honeymark.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run_experiment(cfg: ExperimentConfig, force=False) -> Path:
    """Run every stage; on failure record the stage and error, then re-raise."""
    pipe = Pipeline(cfg)
    with output_lock(pipe.out):
        stage = None
        try:
            for stage in STAGES:
                pipe.run_stage(stage, force=force)
        except Exception as exc:
            write_json(pipe.out / "error.json", {"stage": stage, "type": type(exc).__name__, "message": str(exc)})
            raise
    (pipe.out / "error.json").unlink(missing_ok=True)
    return pipe.dir("report") / "summary.csv"
