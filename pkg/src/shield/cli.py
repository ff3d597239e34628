"""Command-line entry point: ``shield <command> --config exp.yaml [--dataset NAME]``.

Errors are reported as one JSON line on stderr with a per-family exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import alignment, baselines, datasets, extraction, fusion
from .config import AppConfig, load_config
from .embedding import FeatureEmbeddingCache, feature_side_spec, load_encoder
from .errors import ConfigError, ShieldError, StorageError
from .llm import HttpLlmClient, LexiconClient, LlmClient, RateLimiter, ReplayClient, load_lexicon

logger = logging.getLogger("shield")

COMMANDS = ("stats", "extract", "train", "eval", "align", "baseline", "report")


def build_client(cfg: AppConfig) -> LlmClient:
    ext = cfg.extraction
    common = dict(model_id=ext.model_id, temperature=ext.temperature, top_p=ext.top_p,
                  timeout=ext.timeout, max_retries=ext.max_retries)
    if ext.client == "live":
        return HttpLlmClient(endpoint=ext.endpoint, api_key=ext.api_key,
                             max_output_tokens=ext.max_output_tokens, **common)
    if ext.client == "replay":
        return ReplayClient.from_jsonl(ext.replay_path, **common)
    lexicon = load_lexicon(ext.lexicon_path) if ext.lexicon_path else dict(ext.lexicon)
    return LexiconClient(lexicon=lexicon, **common)


class Runner:
    def __init__(self, cfg: AppConfig, out=None):
        self.cfg = cfg
        self.out = out
        self._client = None
        self._rate_limiter = RateLimiter(cfg.extraction.rate_limit)

    @property
    def client(self) -> LlmClient:
        if self._client is None:
            self._client = build_client(self.cfg)
        return self._client

    def dataset_names(self, name: str | None) -> list[str]:
        if name in (None, "all"):
            return list(self.cfg.datasets)
        if name not in self.cfg.datasets:
            raise ConfigError(f"datasets.{name}", "not defined in config")
        return [name]

    def posts(self, name: str) -> list[datasets.Post]:
        d = self.cfg.datasets[name]
        return datasets.load_posts(
            d.path, d.format, label_map=d.label_map, platform=d.platform,
            id_field=d.id_field, text_field=d.text_field, label_field=d.label_field,
        )

    def split(self, posts):
        return datasets.split_dataset(posts, self.cfg.split.ratios, self.cfg.split.seed)

    def features(self, posts) -> dict[str, extraction.FeatureSet]:
        cache = extraction.ExtractionCache(self.cfg.extraction.cache_dir)
        return extraction.extract_corpus(
            posts, self.client, cache, prompt_version=self.cfg.extraction.prompt_version,
            max_workers=self.cfg.extraction.parallelism, rate_limiter=self._rate_limiter,
        )

    def feature_cache(self):
        return FeatureEmbeddingCache(self.cfg.embedding_cache) if self.cfg.embedding_cache else None

    def out_path(self, *parts) -> Path:
        path = self.cfg.output_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def emit(self, obj):
        print(json.dumps(obj, sort_keys=True) if not isinstance(obj, str) else obj, file=self.out or sys.stdout)

    # commands --------------------------------------------------------------

    def stats(self, name):
        rows = {n: datasets.dataset_stats(self.posts(n)) for n in self.dataset_names(name)}
        self.out_path("stats.json").write_text(
            json.dumps({n: dataclasses.asdict(s) for n, s in rows.items()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        self.emit(datasets.format_stats_table(rows))

    def extract(self, name):
        for n in self.dataset_names(name):
            feats = self.features(self.posts(n))
            path = extraction.write_features_jsonl(feats, self.out_path("features", f"{n}.jsonl"))
            self.emit({"dataset": n, "features": str(path), "n_posts": len(feats),
                       "n_non_hateful": sum(fs.non_hateful for fs in feats.values())})

    def train(self, name):
        for n in self.dataset_names(name):
            train_posts, val_posts, _ = self.split(self.posts(n))
            feats = self.features(train_posts + val_posts)
            ckpt = self.out_path("checkpoints", n, "model.pt").parent
            _, report = fusion.train(train_posts, val_posts, feats, self.cfg.train, checkpoint_dir=ckpt,
                                     metrics_path=ckpt / "metrics.jsonl", feature_cache=self.feature_cache())
            self.emit({"dataset": n, "checkpoint": str(ckpt), "val_accuracy": report.val_accuracy,
                       "best_epoch": report.best_epoch, "fe_frozen": report.fe_digest_before == report.fe_digest_after})

    def eval(self, name):
        for n in self.dataset_names(name):
            ckpt = self.cfg.output_dir / "checkpoints" / n
            if not (ckpt / "checkpoint.json").exists():
                raise StorageError(f"no checkpoint at {ckpt}; run train first")
            model, _ = fusion.load_checkpoint(ckpt)
            _, _, test_posts = self.split(self.posts(n))
            acc = fusion.evaluate_accuracy(model, test_posts, self.features(test_posts),
                                           feature_cache=self.feature_cache())
            summary = {"dataset": n, "split": "test", "n_posts": len(test_posts), "accuracy": acc}
            self.out_path("eval", f"{n}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                          encoding="utf-8")
            self.emit(summary)

    def _fe_encoder(self):
        return load_encoder(feature_side_spec(self.cfg.train.fe_encoder, self.cfg.train.max_tokens))

    def align(self, name):
        for n in self.dataset_names(name):
            posts = [p for p in self.posts(n) if p.human_rationales]
            result = alignment.align_corpus(self.features(posts), posts, self._fe_encoder())
            path = self.out_path("alignment", f"{n}.json")
            path.write_text(result.to_json() + "\n", encoding="utf-8")
            self.emit({"dataset": n, "alignment": str(path), "aggregate_overlap": result.aggregate_overlap,
                       "aggregate_cosine": result.aggregate_cosine, "n_evaluated": result.n_evaluated,
                       "n_skipped": result.n_skipped})

    def report(self, name):
        for n in self.dataset_names(name):
            posts = [p for p in self.posts(n) if p.human_rationales]
            path = alignment.render_overlap_report(posts, self.features(posts), self.out_path("reports", f"{n}.html"),
                                                   encoder=self._fe_encoder())
            self.emit({"dataset": n, "report": str(path)})

    def baseline(self, name):
        for n in self.dataset_names(name):
            d = self.cfg.datasets[n]
            if d.exemplar is None:
                raise ConfigError(f"datasets.{n}.exemplar", "one-shot baseline needs a pinned exemplar")
            posts = self.posts(n)
            if self.cfg.baseline.split == "test":
                posts = self.split(posts)[2]
            rep = baselines.evaluate_oneshot(
                posts, self.client, d.exemplar, strict=self.cfg.baseline.strict,
                version=self.cfg.baseline.prompt_version, max_workers=self.cfg.extraction.parallelism,
                rate_limiter=self._rate_limiter,
            )
            baselines.write_oneshot_results(
                rep, self.out_path("baseline", f"{n}.results.jsonl"), self.out_path("baseline", f"{n}.summary.json"),
                latency_log=self.out_path("baseline", f"{n}.latency.log.jsonl"),
            )
            self.emit({"dataset": n, **rep.summary()})


def dispatch(command: str, cfg: AppConfig, dataset: str | None = None, out=None) -> int:
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown command {command!r}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.output_dir / ".shield.lock"))
    try:
        with lock.acquire(timeout=0):
            getattr(Runner(cfg, out), command)(dataset)
    except Timeout:
        raise StorageError(f"{cfg.output_dir} is locked by another shield command") from None
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shield", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", "-c", required=True, help="YAML experiment config")
    p.add_argument("--dataset", "-d", default=None, help="dataset name from the config (default: all)")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--client", choices=("live", "replay", "lexicon"), help="override extraction.client")
    p.add_argument("--seed", type=int, help="override train.seed and split.seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--learning-rate", type=float, help="override train.learning_rate")
    p.add_argument("--strict", action="store_true", help="score baseline abstentions as errors")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(cfg: AppConfig, args) -> AppConfig:
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.client and args.client != cfg.extraction.client:
        if args.client == "replay" and cfg.extraction.replay_path is None:
            raise ConfigError("extraction.replay_path", "required for the replay client")
        if args.client == "lexicon" and not (cfg.extraction.lexicon_path or cfg.extraction.lexicon):
            raise ConfigError("extraction.lexicon", "required for the lexicon client")
        cfg.extraction.client = args.client
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
        cfg.split.seed = args.seed
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.learning_rate is not None:
        changes["learning_rate"] = args.learning_rate
    if changes:
        cfg.train = dataclasses.replace(cfg.train, **changes)
    if args.strict:
        cfg.baseline.strict = True
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return dispatch(args.command, cfg, args.dataset)
    except ShieldError as exc:
        print(json.dumps({"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}),
              file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "exit_code": 1, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
