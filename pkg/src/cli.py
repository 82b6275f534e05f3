"""
実験ランナー - 単発学習、α/減衰スイープ、予算比較、セルフテストのコマンドライン
"""
import argparse
import asyncio
import csv
import json
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from loguru import logger

from src.checkpoint import save_checkpoint
from src.config import RunConfig, load_run_config, settings
from src.interp_trainer import (
    SweepRow,
    aggregate_rows,
    final_accuracies,
    prepare_data,
    run_interpolated_training,
    write_metrics_csv,
    write_summary,
)
from src.models import GOLDEN_COUNTS
from src.selftest import FAULTS, run_selftest
from src.tensor_core import BiasBlendError, ConfigError, DataFormatError

EXIT_OK = 0
EXIT_SELFTEST_FAILED = 1
EXIT_CONFIG = 2
EXIT_SWEEP_PARTIAL = 3

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """実行ディレクトリに1つだけ置くマニフェスト"""
    config: dict
    config_hash: str
    out_dir: str
    created_at: str
    finished_at: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)

    def write(self):
        path = Path(self.out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def read(cls, out_dir) -> Optional["RunManifest"]:
        path = Path(out_dir) / MANIFEST_NAME
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}") from None


class ExperimentRunner:
    """I-MLP 実験ランナー"""

    def __init__(self):
        self.parser = self._register_handlers()
        self._file_sink: Optional[int] = None

    # ============== 引数 ==============

    def _add_run_flags(self, parser: argparse.ArgumentParser, sweep: bool = False):
        parser.add_argument("--config", help="実行設定 YAML（フラットなキー/値）")
        parser.add_argument("--prior", choices=["cnn", "mixer", "none"])
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--subset", type=int, help="学習データの層化サブセット件数")
        parser.add_argument("--dataset", choices=["cifar10", "cifar100"])
        parser.add_argument("--data-dir", help="CIFAR バイナリのディレクトリ（既定: $BIASBLEND_DATA）")
        parser.add_argument("--out", help="出力ディレクトリ")
        parser.add_argument("--no-augment", action="store_true")
        parser.add_argument(
            "--force", action="store_true", default=settings.force, help="既存のマニフェストを上書き"
        )
        parser.add_argument("--layer-mask", help="補間する層（例: 1,1,0,0,0,0）")
        parser.add_argument(
            "--interpolate-bias", action="store_true", default=None, help="展開バイアスも補間する"
        )
        parser.add_argument(
            "--interpolate-head", action="store_true", default=None, help="形状が一致する分類器も補間する"
        )
        if not sweep:
            parser.add_argument("--seed", type=int)
            parser.add_argument("--alpha", type=float)
            parser.add_argument("--decay-a", type=float)
            parser.add_argument("--decay-k", type=float)
            parser.add_argument("--test-time-alpha", type=float)
            parser.add_argument("--arch", choices=["standard", "budget-1", "budget-2"])
            parser.add_argument("--no-interp", action="store_true")

    def _register_handlers(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="biasblend", description="Interpolated-MLP 実験ランナー")
        parser.add_argument("--log-level", default=settings.log_level)
        sub = parser.add_subparsers(dest="command", required=True)

        train = sub.add_parser("train", help="1回の補間学習")
        self._add_run_flags(train)
        train.set_defaults(handler=self.cmd_train)

        sweep = sub.add_parser("sweep", help="α または減衰指数 k のスイープ")
        self._add_run_flags(sweep, sweep=True)
        sweep.add_argument("--decay-a", type=float, default=0.5)
        points = sweep.add_mutually_exclusive_group(required=True)
        points.add_argument("--alphas", type=_float_list)
        points.add_argument("--decay-k", type=_float_list, dest="decay_ks")
        sweep.add_argument("--seeds", type=_int_list, default=[0])
        sweep.add_argument("--jobs", type=int, default=settings.jobs)
        sweep.set_defaults(handler=self.cmd_sweep)

        selftest = sub.add_parser("selftest", help="データ不要の等価性チェック")
        selftest.add_argument("--inject-fault", choices=FAULTS)
        selftest.set_defaults(handler=self.cmd_selftest)

        budget = sub.add_parser("budget-compare", help="MLP-1 / MLP-2 の補間予算比較")
        self._add_run_flags(budget, sweep=True)
        budget.add_argument("--alpha", type=float, default=0.5)
        budget.add_argument("--seeds", type=_int_list, default=[0])
        budget.set_defaults(handler=self.cmd_budget_compare)
        return parser

    @staticmethod
    def _overrides(args: argparse.Namespace) -> Dict:
        keys = {
            "prior": "prior", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
            "subset": "subset", "dataset": "dataset", "data_dir": "data_dir", "seed": "seed",
            "alpha": "alpha", "decay_a": "decay_a", "decay_k": "decay_k",
            "test_time_alpha": "test_time_alpha", "arch": "arch", "layer_mask": "layer_mask",
            "interpolate_bias": "interpolate_bias", "interpolate_head": "interpolate_head",
        }
        overrides = {dest: getattr(args, src, None) for src, dest in keys.items()}
        if getattr(args, "no_augment", False):
            overrides["augment"] = False
        if getattr(args, "no_interp", False):
            overrides["no_interp"] = True
        return overrides

    # ============== 出力ディレクトリ ==============

    def _attach_log(self, out_dir: Path):
        if self._file_sink is not None:
            logger.remove(self._file_sink)
        self._file_sink = logger.add(out_dir / "run.log", rotation="10 MB", retention=5)

    def _prepare_run_dir(self, out: Optional[str], config: RunConfig, force: bool) -> RunManifest:
        digest = config.content_hash()
        out_dir = Path(out) if out else Path(settings.out_dir) / f"run-{digest[:12]}"
        existing = RunManifest.read(out_dir)
        if existing is not None and not force:
            reason = "an identical config" if existing.config_hash == digest else "another config"
            raise ConfigError("out", f"{out_dir} already holds a run of {reason}; pass --force to overwrite")
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(
            config=config.model_dump(), config_hash=digest, out_dir=str(out_dir), created_at=_now()
        )
        manifest.write()
        self._attach_log(out_dir)
        return manifest

    # ============== コマンド ==============

    def cmd_train(self, args: argparse.Namespace) -> int:
        """単発の補間学習: metrics.csv / summary.json / チェックポイントを書き出す"""
        config = load_run_config(args.config, self._overrides(args))
        train_config = config.to_train_config()
        data = prepare_data(train_config)
        manifest = self._prepare_run_dir(args.out, config, args.force)
        out_dir = Path(manifest.out_dir)
        logger.info(f"Run directory: {out_dir} (hash {manifest.config_hash[:12]})")

        result = run_interpolated_training(train_config, data)
        write_metrics_csv(result.records, out_dir / "metrics.csv")
        write_summary(result, train_config, out_dir / "summary.json")
        checkpoints = out_dir / "checkpoints"
        for model in (result.imlp, result.prior, result.test_time_model):
            if model is not None:
                save_checkpoint(model, checkpoints / f"{model.arch}.bbck", seed=config.seed, epoch=config.epochs)

        manifest.finished_at = _now()
        manifest.write()
        print("📊 最終 top-1 正解率")
        for name, top1 in final_accuracies(result.records).items():
            print(f"  {name:<24} {top1:6.2f}%")
        print(f"✅ 結果を保存しました: {out_dir}")
        return EXIT_OK

    def _child_command(self, args: argparse.Namespace, point: float, seed: int, out_dir: Path) -> List[str]:
        cmd = [sys.executable, "-m", "src.cli", "--log-level", args.log_level, "train",
               "--seed", str(seed), "--out", str(out_dir), "--force"]
        if args.alphas is not None:
            cmd += ["--alpha", repr(point)]
        else:
            cmd += ["--decay-a", repr(args.decay_a), "--decay-k", repr(point)]
        for flag in ("config", "prior", "epochs", "batch_size", "lr", "subset", "dataset", "data_dir", "layer_mask"):
            value = getattr(args, flag, None)
            if value is not None:
                cmd += [f"--{flag.replace('_', '-')}", str(value)]
        for flag in ("no_augment", "interpolate_bias", "interpolate_head"):
            if getattr(args, flag, None):
                cmd.append(f"--{flag.replace('_', '-')}")
        return cmd

    async def _run_point(
        self, semaphore: asyncio.Semaphore, cmd: List[str], out_dir: Path
    ) -> Optional[float]:
        async with semaphore:
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "child.log", "wb") as log_file:
                process = await asyncio.create_subprocess_exec(*cmd, stdout=log_file, stderr=log_file)
                code = await process.wait()
        if code != 0:
            logger.error(f"Sweep point {out_dir} failed with exit code {code}")
            return None
        with open(out_dir / "summary.json", "r", encoding="utf-8") as f:
            summary = json.load(f)
        return float(summary["final_top1"][summary["imlp"]])

    async def _run_sweep(self, args: argparse.Namespace, root: Path) -> List[Optional[SweepRow]]:
        points = args.alphas if args.alphas is not None else args.decay_ks
        label = "alpha" if args.alphas is not None else "k"
        semaphore = asyncio.Semaphore(max(1, args.jobs))
        jobs, keys = [], []
        for point in points:
            for seed in args.seeds:
                out_dir = root / f"{label}-{point:g}" / f"seed-{seed}"
                jobs.append(self._run_point(semaphore, self._child_command(args, point, seed, out_dir), out_dir))
                keys.append((point, seed))
        scores = await asyncio.gather(*jobs)
        return [
            SweepRow(point, seed, score) if score is not None else None
            for (point, seed), score in zip(keys, scores)
        ]

    def cmd_sweep(self, args: argparse.Namespace) -> int:
        """各点を子プロセスで学習し aggregate.csv（alpha_or_k, mean, std）にまとめる"""
        base = load_run_config(args.config, self._overrides(args))
        if args.alphas is not None and any(not 0.0 <= a <= 1.0 for a in args.alphas):
            raise ConfigError("alphas", "every alpha must lie in [0, 1]")
        if args.decay_ks is not None and any(k < 0 for k in args.decay_ks):
            raise ConfigError("decay_k", "decay exponents must be >= 0")
        root = Path(args.out) if args.out else Path(settings.out_dir) / f"sweep-{base.content_hash()[:12]}"
        root.mkdir(parents=True, exist_ok=True)
        self._attach_log(root)

        results = asyncio.run(self._run_sweep(args, root))
        rows = [row for row in results if row is not None]
        failures = len(results) - len(rows)
        table = aggregate_rows(rows)
        with open(root / "aggregate.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["alpha_or_k", "mean", "std"])
            for value, mean, std in table:
                writer.writerow([repr(value), repr(mean), repr(std)])

        print("📊 スイープ結果")
        print(f"  {'alpha_or_k':>12} {'mean':>8} {'std':>8}")
        for value, mean, std in table:
            print(f"  {value:>12g} {mean:8.2f} {std:8.2f}")
        if failures:
            print(f"❌ {failures}/{len(results)} 点が失敗しました")
            return EXIT_SWEEP_PARTIAL
        print(f"✅ 集計を保存しました: {root / 'aggregate.csv'}")
        return EXIT_OK

    def cmd_selftest(self, args: argparse.Namespace) -> int:
        """等価性オラクルを実行して合否表を表示"""
        results = run_selftest(inject_fault=args.inject_fault)
        print("=" * 60)
        print("🧪 セルフテスト")
        print("=" * 60)
        for r in results:
            mark = "✅" if r.passed else "❌"
            print(f"{mark} {r.name:<26} {r.seconds:6.2f}s  {r.detail}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            print(f"\n❌ 失敗: {', '.join(failed)}")
            return EXIT_SELFTEST_FAILED
        print("\n✅ すべて合格")
        return EXIT_OK

    def cmd_budget_compare(self, args: argparse.Namespace) -> int:
        """MLP-1 / MLP-2 × {ベースライン, CNN 補間} の 2×2 比較"""
        overrides = self._overrides(args)
        overrides["prior"] = "cnn"
        base = load_run_config(args.config, overrides)
        root = Path(args.out) if args.out else Path(settings.out_dir) / f"budget-{base.content_hash()[:12]}"
        root.mkdir(parents=True, exist_ok=True)
        self._attach_log(root)
        data = prepare_data(base.to_train_config())

        table: Dict[str, Dict[str, List[float]]] = {}
        for arch, name in (("budget-1", "mlp-1"), ("budget-2", "mlp-2")):
            table[name] = {"baseline": [], "interpolated": []}
            for seed in args.seeds:
                for column, no_interp in (("baseline", True), ("interpolated", False)):
                    run = base.model_copy(update={
                        "arch": arch, "seed": seed, "alpha": args.alpha, "no_interp": no_interp,
                    })
                    result = run_interpolated_training(run.to_train_config(), data)
                    table[name][column].append(final_accuracies(result.records)[result.imlp.arch])
                    write_metrics_csv(result.records, root / f"{name}-{column}-seed{seed}.csv")

        print("📊 補間予算の比較")
        print(f"  {'model':<6} {'params':>12} {'baseline':>10} {'interpolated':>13} {'gain':>7}")
        with open(root / "budget.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["model", "params", "baseline", "interpolated", "gain"])
            for name, columns in table.items():
                baseline = sum(columns["baseline"]) / len(columns["baseline"])
                interpolated = sum(columns["interpolated"]) / len(columns["interpolated"])
                gain = interpolated - baseline
                writer.writerow([name, GOLDEN_COUNTS[name], repr(baseline), repr(interpolated), repr(gain)])
                print(f"  {name:<6} {GOLDEN_COUNTS[name]:>12,} {baseline:10.2f} {interpolated:13.2f} {gain:+7.2f}")
        print(f"✅ 結果を保存しました: {root}")
        return EXIT_OK

    # ============== 実行 ==============

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        logger.remove()
        logger.add(sys.stderr, level=args.log_level.upper())
        try:
            return args.handler(args)
        except (ConfigError, DataFormatError) as e:
            logger.error(f"Configuration or data error: {e}")
            print(f"❌ {e}", file=sys.stderr)
            return EXIT_CONFIG
        except BiasBlendError as e:
            logger.error(f"Run failed: {e}")
            print(f"❌ {e}", file=sys.stderr)
            return EXIT_CONFIG
        finally:
            if self._file_sink is not None:
                logger.remove(self._file_sink)
                self._file_sink = None


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    return ExperimentRunner().run(argv)


if __name__ == "__main__":
    sys.exit(main())
