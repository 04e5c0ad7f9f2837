"""Command-line pipeline: filter -> pair -> morph -> redigitize -> split ->
train -> eval -> vuln -> report -> plot.

Every subcommand reads its inputs from, and writes its artifacts into, one
run directory. Each stage leaves ``stages/<name>.json`` recording the config
hash, seed and input digests.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import pickle
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import baselines, datakit, metrics, morphgen, pwmad, trainkit

logger = logging.getLogger("morphmad")

STAGES = ("filter", "pair", "morph", "redigitize", "split", "train", "eval", "vuln", "report", "plot")
MODELS = ("pwmad", "lbp", "feature_svm", "finetune", "scratch")


class StageError(RuntimeError):
    """A prerequisite artifact is missing or the config is unusable."""


@dataclass
class ExperimentConfig:
    corpus: dict = field(default_factory=dict)
    stages: list = field(default_factory=lambda: list(STAGES))
    seed: int = 0
    frontality: dict = field(default_factory=dict)
    pairing: dict = field(default_factory=lambda: {"pairs_per_key": 2})
    morph: dict = field(default_factory=lambda: {"alpha": 0.5})
    redigitization: dict | None = None
    split: dict = field(default_factory=lambda: {"ratios": [1 / 3, 1 / 3, 1 / 3]})
    model: str = "pwmad"
    pwmad: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    lbp: dict = field(default_factory=dict)
    provider: str = "vgg16"
    architecture: str = "inception_v3"
    train_media: list = field(default_factory=lambda: ["D", "PS"])
    test_media: list = field(default_factory=lambda: ["D", "PS"])

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise StageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(path: Path, stage: str):
    if not path.is_file():
        raise StageError(f"missing artifact {path} (run `{stage}` first)")
    return json.loads(path.read_text(encoding="utf-8"))


class Run:
    def __init__(self, run_dir: Path, config: ExperimentConfig):
        self.dir = Path(run_dir)
        self.config = config
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def record(self, stage: str, inputs: list[Path], outputs: list[Path], extra: dict | None = None) -> None:
        rec = {
            "stage": stage,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "inputs": {str(p): _file_digest(p) for p in sorted(inputs) if p.is_file()},
            "outputs": sorted(str(p.relative_to(self.dir)) for p in outputs),
        }
        if extra:
            rec.update(extra)
        _dump(self.path("stages", f"{stage}.json"), rec)
        _dump(self.path("config.json"), self.config.to_json())

    # ------------------------------------------------------------- corpus
    def corpus_path(self, key: str) -> Path:
        try:
            p = Path(self.config.corpus[key])
        except KeyError:
            raise StageError(f"config.corpus.{key} is not set") from None
        if not p.exists():
            raise StageError(f"corpus {key} not found: {p}")
        return p

    def corpus_identities(self) -> dict[str, str]:
        meta = json.loads(self.corpus_path("metadata").read_text(encoding="utf-8"))
        return {k: (v[0] if isinstance(v, list) else v) for k, v in meta.items()}

    def source_image(self, image_id: str) -> np.ndarray:
        d = self.corpus_path("images_dir")
        for suffix in datakit.IMAGE_SUFFIXES:
            p = d / f"{image_id}{suffix}"
            if p.is_file():
                return morphgen.load_image(p)
        raise StageError(f"image {image_id!r} not found in {d}")


# ------------------------------------------------------------------- stages


def stage_filter(run: Run) -> None:
    lms_path = run.corpus_path("landmarks")
    landmarks = morphgen.read_landmark_cache(lms_path)
    passed, reports = morphgen.frontal_images(landmarks, **run.config.frontality)
    out = run.path("filter", "frontality.json")
    _dump(
        out,
        {
            "passed": passed,
            "rejected": sorted(set(landmarks) - set(passed)),
            "reports": {k: vars(v) for k, v in reports.items()},
        },
    )
    run.record("filter", [lms_path], [out], {"n_passed": len(passed), "n_total": len(landmarks)})
    logger.info("filter: %d of %d images frontal", len(passed), len(landmarks))


def stage_pair(run: Run) -> None:
    frontal = _load(run.path("filter", "frontality.json"), "filter")["passed"]
    identities = run.corpus_identities()
    cfg = run.config.pairing
    keys = cfg.get("keys")
    if keys is None:
        # one key per identity (its first frontal image), first num_keys identities
        first = {}
        for image_id in frontal:
            first.setdefault(identities[image_id], image_id)
        keys = [first[i] for i in sorted(first)][: cfg.get("num_keys", max(1, len(first) // 3))]
    missing = sorted(set(keys) - set(frontal))
    if missing:
        raise StageError(f"key images did not pass the frontality filter: {missing}")
    key_identities = {identities[k] for k in keys}
    pool = [i for i in frontal if i not in set(keys)]
    if cfg.get("exclude_key_identities", True):
        # leave each key identity's other images as bona fide samples
        pool = [i for i in pool if identities[i] not in key_identities]
    if cfg.get("one_image_per_identity", True):
        # an accomplice identity then joins one key only, so identity
        # components stay small enough for identity-disjoint splits
        first_image: dict[str, str] = {}
        for i in pool:
            first_image.setdefault(identities[i], i)
        pool = [i for i in pool if first_image[identities[i]] == i]
    provider = morphgen.ThumbnailEmbedding(cfg.get("embedding_size", 16))
    pairs = morphgen.select_pairs(keys, pool, provider, cfg.get("pairs_per_key", 2), identities, run.source_image)
    out = run.path("pair", "pairs.json")
    _dump(out, {"keys": sorted(keys), "pairs": [list(p) for p in pairs]})
    run.record("pair", [run.path("filter", "frontality.json")], [out], {"n_pairs": len(pairs)})
    logger.info("pair: %d pairs from %d keys", len(pairs), len(keys))


def _scaled(lms: morphgen.LandmarkSet, sx: float, sy: float) -> morphgen.LandmarkSet:
    s = np.array([sx, sy])
    return morphgen.LandmarkSet(
        lms.points * s, np.multiply(lms.eye_left, s), np.multiply(lms.eye_right, s), np.multiply(lms.nose_top, s)
    )


def stage_morph(run: Run) -> None:
    import cv2

    pairs = _load(run.path("pair", "pairs.json"), "pair")["pairs"]
    frontal = _load(run.path("filter", "frontality.json"), "filter")["passed"]
    landmarks = morphgen.read_landmark_cache(run.corpus_path("landmarks"))
    identities = run.corpus_identities()
    alpha = float(run.config.morph.get("alpha", 0.5))

    bona_dir = run.path("digital", "bonafide")
    atk_dir = run.path("digital", "attack")
    bona_dir.mkdir(parents=True, exist_ok=True)
    atk_dir.mkdir(parents=True, exist_ok=True)
    metadata, outputs, morphs = {}, [], {}
    for key, acc in pairs:
        img_k, img_a = run.source_image(key), run.source_image(acc)
        lm_k, lm_a = landmarks[key], landmarks[acc]
        if img_a.shape != img_k.shape:
            h, w = img_k.shape[:2]
            lm_a = _scaled(lm_a, w / img_a.shape[1], h / img_a.shape[0])
            img_a = cv2.resize(img_a, (w, h), interpolation=cv2.INTER_AREA)
        job = morphgen.MorphJob(key, acc, alpha)
        morph_id = f"M_{key}__{acc}"
        p = atk_dir / f"{morph_id}.png"
        morphgen.save_image(p, job.run(img_k, img_a, lm_k, lm_a))
        outputs.append(p)
        metadata[morph_id] = sorted({identities[key], identities[acc]})
        morphs[morph_id] = {"key": key, "accomplice": acc, "alpha": alpha, "identities": metadata[morph_id]}

    sources = {i for pair in pairs for i in pair}
    for image_id in frontal:
        if image_id in sources:
            continue
        p = bona_dir / f"{image_id}.png"
        morphgen.save_image(p, run.source_image(image_id))
        outputs.append(p)
        metadata[image_id] = [identities[image_id]]
    _dump(run.path("morph", "metadata.json"), metadata)
    _dump(run.path("morph", "morphs.json"), morphs)
    run.record("morph", [run.path("pair", "pairs.json")], outputs, {"n_morphs": len(morphs)})
    logger.info("morph: %d attacks, %d bona fides", len(morphs), len(metadata) - len(morphs))


def _profile(run: Run) -> morphgen.RedigitizationProfile:
    if run.config.redigitization is None:
        return morphgen.RedigitizationProfile.default(seed=run.config.seed)
    return morphgen.RedigitizationProfile.from_json(run.config.redigitization)


def stage_redigitize(run: Run) -> None:
    _load(run.path("morph", "metadata.json"), "morph")
    profile = _profile(run)
    outputs = []
    for label in ("bonafide", "attack"):
        src_dir = run.path("digital", label)
        dst_dir = run.path("ps", label)
        dst_dir.mkdir(parents=True, exist_ok=True)
        for p in sorted(src_dir.glob("*.png")):
            # per-image seed derived from the profile seed and the image name
            digest = int(hashlib.sha256(p.stem.encode()).hexdigest()[:8], 16)
            prof = morphgen.RedigitizationProfile(profile.steps, (profile.seed * 1_000_003 + digest) % (1 << 32))
            out = dst_dir / p.name
            morphgen.save_image(out, morphgen.simulate_redigitization(morphgen.load_image(p), prof))
            outputs.append(out)
    _dump(run.path("ps", "profile.json"), profile.to_json())
    run.record("redigitize", [], outputs, {"profile": profile.to_json()})
    logger.info("redigitize: %d images", len(outputs))


def stage_split(run: Run) -> None:
    metadata = _load(run.path("morph", "metadata.json"), "morph")
    ps_dirs = [d for d in (run.path("ps", "bonafide"), run.path("ps", "attack")) if d.is_dir()]
    records = datakit.build_manifest(
        run.path("digital", "bonafide"), run.path("digital", "attack"), ps_dirs, metadata
    )
    # manifest paths relative to the run dir keep the artifact byte-identical across locations
    records = [
        datakit.SampleRecord(r.image_id, str(Path(r.path).relative_to(run.dir)), r.identity_ids, r.medium, r.label)
        for r in records
    ]
    ratios = run.config.split.get("ratios", [1 / 3, 1 / 3, 1 / 3])
    split = datakit.split_identity_disjoint(records, ratios, seed=run.config.seed)
    records = split.apply(records)
    run.path("split").mkdir(exist_ok=True)
    datakit.write_manifest(run.path("split", "manifest.csv"), records)
    split.save(run.path("split", "split.json"))
    run.record(
        "split",
        [run.path("morph", "metadata.json")],
        [run.path("split", "manifest.csv"), run.path("split", "split.json")],
        {"stats": split.stats},
    )
    logger.info("split: %s", split.stats)


def _records(run: Run, split: str, medium: str) -> list[datakit.SampleRecord]:
    path = run.path("split", "manifest.csv")
    if not path.is_file():
        raise StageError(f"missing artifact {path} (run `split` first)")
    recs = [r for r in datakit.read_manifest(path) if r.split == split and r.medium == medium]
    if not recs:
        raise StageError(f"no {split} records for medium {medium}")
    return recs


def _images(run: Run, records) -> list[np.ndarray]:
    return [morphgen.load_image(run.dir / r.path) for r in records]


def _labels(records) -> np.ndarray:
    return np.array([1 if r.is_attack else 0 for r in records])


def _torch_split(run: Run, records, tag: str, size: int, mean, std) -> trainkit.ImageSplit:
    x = pwmad.preprocess_images(_images(run, records), size, mean, std)
    return trainkit.ImageSplit(x, _labels(records), tag, [r.image_id for r in records])


def _model_path(run: Run, model: str, medium: str) -> Path:
    return run.path("models", f"{model}_{medium}.{'ckpt' if model == 'pwmad' else 'pkl'}")


def _train_config(run: Run) -> trainkit.TrainConfig:
    cfg = dict(run.config.train)
    cfg.setdefault("seed", run.config.seed)
    return trainkit.TrainConfig(**cfg)


def train_one(run: Run, model_name: str, medium: str) -> Path:
    train_recs = _records(run, "train", medium)
    dev_recs = _records(run, "dev", medium)
    tcfg = _train_config(run)
    out = _model_path(run, model_name, medium)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = None
    if model_name == "pwmad":
        mcfg = pwmad.PwMadConfig(**run.config.pwmad)
        tr = _torch_split(run, train_recs, "train", mcfg.input_size, mcfg.mean, mcfg.std)
        dv = _torch_split(run, dev_recs, "dev", mcfg.input_size, mcfg.mean, mcfg.std)
        model = pwmad.build_model(mcfg, seed=tcfg.seed)
        _, log = trainkit.train(model, tr, dv, tcfg)
        pwmad.save_checkpoint(out, model, {"train_medium": medium, "best_epoch": log.best_epoch})
    elif model_name == "lbp":
        cfg = baselines.LbpConfig(**run.config.lbp)
        det = baselines.LbpDetector.fit(_images(run, train_recs), _labels(train_recs), cfg, seed=tcfg.seed)
        out.write_bytes(pickle.dumps(det))
    elif model_name in ("feature_svm", "finetune"):
        provider = baselines.load_provider(run.config.provider)
        s, mean, std = provider.input_size, pwmad.IMAGENET_MEAN, pwmad.IMAGENET_STD
        tr = _torch_split(run, train_recs, "train", s, mean, std)
        if model_name == "feature_svm":
            model = baselines.train_feature_svm(provider, tr)
        else:
            model, log = baselines.finetune_classifier_head(provider, tr, _torch_split(run, dev_recs, "dev", s, mean, std), tcfg)
        model.input_size = s
        out.write_bytes(pickle.dumps(model))
    elif model_name == "scratch":
        s = 299 if run.config.architecture == "inception_v3" else int(run.config.pwmad.get("input_size", 64))
        mean, std = pwmad.IMAGENET_MEAN, pwmad.IMAGENET_STD
        tr = _torch_split(run, train_recs, "train", s, mean, std)
        dv = _torch_split(run, dev_recs, "dev", s, mean, std)
        model, log = baselines.train_from_scratch(run.config.architecture, tr, dv, tcfg)
        model.input_size = s
        out.write_bytes(pickle.dumps(model))
    else:
        raise StageError(f"unknown model {model_name!r}; choose from {MODELS}")
    outputs = [out]
    if log is not None:
        log.save(out.with_suffix(".trainlog.jsonl"))
        outputs.append(out.with_suffix(".trainlog.jsonl"))
    run.record(
        f"train_{model_name}_{medium}",
        [run.path("split", "manifest.csv")],
        outputs,
        {"splits_read": ["train", "dev"], "best_epoch": None if log is None else log.best_epoch},
    )
    return out


def score_images(model_path: Path, images: list[np.ndarray]) -> np.ndarray:
    if model_path.suffix == ".ckpt":
        model = pwmad.load_checkpoint(model_path)
        x = pwmad.preprocess(images, model.config)
        return np.asarray(pwmad.score(model, x), dtype=np.float64)
    model = pickle.loads(model_path.read_bytes())
    if isinstance(model, baselines.LbpDetector):
        return model.score(images)
    x = pwmad.preprocess_images(images, model.input_size, pwmad.IMAGENET_MEAN, pwmad.IMAGENET_STD)
    return np.asarray(model.score(x), dtype=np.float64)


def pairing_name(train_medium: str, test_medium: str) -> str:
    return f"Train-{train_medium} Test-{test_medium}"


def eval_one(run: Run, model_name: str, train_medium: str, test_medium: str) -> metrics.EvalReport:
    model_path = _model_path(run, model_name, train_medium)
    if not model_path.is_file():
        raise StageError(f"missing artifact {model_path} (run `train --model {model_name} --train-medium {train_medium}` first)")
    recs = _records(run, "test", test_medium)
    scores = score_images(model_path, _images(run, recs))
    table = metrics.ScoreTable([r.image_id for r in recs], scores, [r.label for r in recs], [r.medium for r in recs])
    report = metrics.EvalReport.from_scores(
        table, pairing_name(train_medium, test_medium), model=model_name, train_medium=train_medium, test_medium=test_medium
    )
    stem = f"{model_name}_train-{train_medium}_test-{test_medium}"
    run.path("eval").mkdir(exist_ok=True)
    table.save(run.path("eval", f"{stem}.scores.csv"))
    report.save(run.path("eval", f"{stem}.json"))
    with open(run.path("eval", f"{stem}.roc.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["apcer", "one_minus_bpcer"])
        w.writerows(report.roc_points)
    run.record(
        f"eval_{stem}",
        [model_path, run.path("split", "manifest.csv")],
        [run.path("eval", f"{stem}{s}") for s in (".json", ".scores.csv", ".roc.csv")],
    )
    return report


def _cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def stage_vuln(run: Run) -> None:
    morphs = _load(run.path("morph", "morphs.json"), "morph")
    metadata = _load(run.path("morph", "metadata.json"), "morph")
    identities = run.corpus_identities()
    fr = morphgen.ThumbnailEmbedding(run.config.pairing.get("embedding_size", 16))

    bona = {i: m[0] for i, m in metadata.items() if i not in morphs}
    emb = {i: fr.embed(morphgen.load_image(run.path("digital", "bonafide", f"{i}.png"))) for i in sorted(bona)}
    refs = {}
    for i in sorted(bona):
        refs.setdefault(bona[i], emb[i])

    def reference(identity, fallback_image):
        if identity not in refs:
            refs[identity] = fr.embed(run.source_image(fallback_image))
        return refs[identity]

    nonmated = [_cosine(emb[a], emb[b]) for a, b in itertools.combinations(sorted(emb), 2) if bona[a] != bona[b]]
    if not nonmated:
        raise StageError("vulnerability analysis needs bona fide images of at least two identities")
    result, outputs = {}, []
    for medium, root in (("D", "digital"), ("PS", "ps")):
        rows = []
        for morph_id in sorted(morphs):
            p = run.path(root, "attack", f"{morph_id}.png")
            if not p.is_file():
                continue
            m = morphs[morph_id]
            e = fr.embed(morphgen.load_image(p))
            s1 = _cosine(e, reference(identities[m["key"]], m["key"]))
            s2 = _cosine(e, reference(identities[m["accomplice"]], m["accomplice"]))
            rows.append((morph_id, s1, s2))
        if not rows:
            continue
        table = metrics.VulnTable([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], nonmated)
        out = run.path("vuln", f"vuln_{medium}.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        table.save(out, run.path("vuln", "nonmated.csv"))
        outputs += [out, run.path("vuln", "nonmated.csv")]
        result[f"{medium}-M"] = metrics.vulnerability_report(table)
    _dump(run.path("vuln", "vuln.json"), result)
    run.record("vuln", [run.path("morph", "morphs.json")], outputs + [run.path("vuln", "vuln.json")])
    logger.info("vuln: %s", {k: {f: v[f]["mmpmr"] for f in v} for k, v in result.items()})


def _eval_reports(run: Run) -> list[metrics.EvalReport]:
    paths = sorted(p for p in run.path("eval").glob("*.json")) if run.path("eval").is_dir() else []
    if not paths:
        raise StageError(f"missing artifact {run.path('eval')}/*.json (run `eval` first)")
    return [metrics.EvalReport.load(p) for p in paths]


def stage_report(run: Run) -> None:
    reports = _eval_reports(run)
    order = {("D", "D"): 0, ("PS", "PS"): 1, ("D", "PS"): 2, ("PS", "D"): 3}
    reports.sort(key=lambda r: (order.get((r.train_medium, r.test_medium), 9), r.model))
    text = metrics.format_table(reports)
    gen_rows, gen_json = [], {}
    by_key = {(r.model, r.train_medium, r.test_medium): r for r in reports}
    for model in sorted({r.model for r in reports}):
        a, b = by_key.get((model, "D", "D")), by_key.get((model, "D", "PS"))
        if a is not None and b is not None:
            gen_rows.append((model, a, b))
            gen_json[model] = {
                "train_d_test_d": a.bpcer_at[0.1] * 100,
                "train_d_test_ps": b.bpcer_at[0.1] * 100,
                "increase_pp": metrics.generalization_report(a, b),
            }
    if gen_rows:
        text += "\n" + metrics.format_generalization_table(gen_rows)
    vuln_path = run.path("vuln", "vuln.json")
    if vuln_path.is_file():
        vuln = json.loads(vuln_path.read_text(encoding="utf-8"))
        text += "\nMMPMR (%)\n" + "".join(
            f"{attack}: " + ", ".join(f"FMR={float(f) * 100:g}%: {v['mmpmr'] * 100:.2f}" for f, v in sorted(r.items())) + "\n"
            for attack, r in sorted(vuln.items())
        )
    run.path("report").mkdir(exist_ok=True)
    run.path("report", "table.txt").write_text(text, encoding="utf-8")
    _dump(run.path("report", "report.json"), {"detection": [r.to_json() for r in reports], "generalization": gen_json})
    run.record("report", [], [run.path("report", "table.txt"), run.path("report", "report.json")])
    print(text, end="")


def plot_roc(reports: list[metrics.EvalReport], out_path) -> tuple[Path, Path]:
    """Vector ROC plot (APCER vs 1-BPCER) plus a CSV of the raw points."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise StageError("no reports to plot")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(5, 5))
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report", "model", "apcer", "one_minus_bpcer"])
        for r in reports:
            if not r.roc_points:
                warnings.warn(f"report {r.name!r} has no ROC points; skipped")
                continue
            label = f"{r.model} {r.name}".strip()
            x, y = zip(*r.roc_points)
            ax.plot(x, y, drawstyle="steps-post", label=label)
            for px, py in r.roc_points:
                w.writerow([r.name, r.model, repr(px), repr(py)])
    ax.set_xlabel("APCER")
    ax.set_ylabel("1-BPCER")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize="small")
    fig.savefig(out_path, format=out_path.suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
    return out_path, csv_path


def stage_plot(run: Run) -> None:
    reports = _eval_reports(run)
    svg, csv_path = plot_roc(reports, run.path("plot", "roc.svg"))
    run.record("plot", [], [svg, csv_path])


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--run-dir", type=Path, required=True, help="run directory for all artifacts")
    common.add_argument("--train-medium", choices=datakit.MEDIA)
    common.add_argument("--test-medium", choices=datakit.MEDIA)
    common.add_argument("--model", choices=MODELS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="morphmad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        sub.add_parser(name, parents=[common])
    return parser


def _resolve_config(args) -> ExperimentConfig:
    stored = args.run_dir / "config.json"
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
    elif stored.is_file():
        config = ExperimentConfig.load(stored)
    else:
        raise StageError("no --config given and the run directory has no stored config.json")
    if args.seed is not None:
        config.seed = args.seed
    if args.model is not None:
        config.model = args.model
    if args.train_medium is not None:
        config.train_media = [args.train_medium]
    if args.test_medium is not None:
        config.test_media = [args.test_medium]
    return config


def run_stage(run: Run, name: str) -> None:
    if name == "train":
        for medium in run.config.train_media:
            train_one(run, run.config.model, medium)
    elif name == "eval":
        for tr, te in itertools.product(run.config.train_media, run.config.test_media):
            eval_one(run, run.config.model, tr, te)
    else:
        globals()[f"stage_{name}"](run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        config = _resolve_config(args)
        run = Run(args.run_dir, config)
        lock = FileLock(str(run.path(".lock")), timeout=0)
        try:
            with lock:
                stages = config.stages if args.command == "pipeline" else [args.command]
                for name in stages:
                    run_stage(run, name)
        except Timeout:
            raise StageError(f"run directory {run.dir} is locked by another process") from None
    except (StageError, baselines.MissingAssetError, datakit.ManifestError, datakit.SplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
