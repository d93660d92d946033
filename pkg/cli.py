"""
命令行入口

    python cli.py gen-synth --config exp.json
    python cli.py pretrain --config exp.json --method fgno
    python cli.py probe    --config exp.json --method fgno [--fraction 0.05]
    python cli.py ablate   --config exp.json --num-noise-seeds 10
    python cli.py sweep    --config exp.json --factors 1 2 4
    python cli.py report   runs/a runs/b --output runs/report

退出码：0 成功，2 用法/配置错误或数据集缺失，3 运行时错误。
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from errors import ConfigError, FGNOError, InvalidArgumentError
from experiment_config import load_config, resolve_output_dir, resolve_seed
from fgno_pipeline import METHODS, FGNOPipeline, build_report

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="实验配置 JSON")
    common.add_argument("--seed", type=int, help="全局种子，优先于 FGNO_SEED")
    common.add_argument("--output", help="输出目录，优先于 FGNO_OUTPUT_DIR")
    common.add_argument("--verbose", "-v", action="store_true", help="输出 DEBUG 日志")

    parser = argparse.ArgumentParser(prog="fgno", description="FGNO 自监督时间序列表征实验")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synth", parents=[common], help="生成合成数据集")

    p = sub.add_parser("pretrain", parents=[common], help="自监督预训练")
    p.add_argument("--method", choices=METHODS, default="fgno")

    p = sub.add_parser("probe", parents=[common], help="(layer, flow time) 网格探测")
    p.add_argument("--method", choices=METHODS, default="fgno")
    p.add_argument("--fraction", type=float, help="训练集标签比例")

    p = sub.add_parser("ablate", parents=[common], help="干净/带噪输入消融")
    p.add_argument("--method", choices=METHODS, default="fgno")
    p.add_argument("--num-noise-seeds", type=int)
    p.add_argument("--layer", type=int)
    p.add_argument("--flow-time", type=float)

    p = sub.add_parser("sweep", parents=[common], help="分辨率扫描")
    p.add_argument("--method", choices=METHODS, default="fgno")
    p.add_argument("--factors", type=int, nargs="+")
    p.add_argument("--layer", type=int)
    p.add_argument("--flow-time", type=float)

    p = sub.add_parser("report", parents=[common], help="合并多个运行目录的结果")
    p.add_argument("runs", nargs="+", help="运行目录")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    config.with_seed(resolve_seed(args.seed, config))

    if args.command == "report":
        out_dir = args.output or "report"
        build_report(args.runs, out_dir)
        config.output_dir = out_dir
        config.save(os.path.join(out_dir, "config.json"))
        return EXIT_OK

    output_dir = resolve_output_dir(args.output, config)
    config.output_dir = output_dir
    if getattr(args, "fraction", None) is not None:
        config.probe.label_fraction = args.fraction
    config.validate()

    pipeline = FGNOPipeline(config, output_dir)
    pipeline.write_config()
    try:
        if args.command == "gen-synth":
            pipeline.setup_dataset()
        elif args.command == "pretrain":
            pipeline.pretrain(args.method)
        elif args.command == "probe":
            pipeline.probe(args.method)
        elif args.command == "ablate":
            pipeline.ablate_clean_noisy(args.method, args.num_noise_seeds, args.layer, args.flow_time)
        elif args.command == "sweep":
            pipeline.resolution_sweep(args.method, args.factors, args.layer, args.flow_time)
        # 模型输入维度可能按数据集调整过，重新写一次
        pipeline.write_config()
    finally:
        pipeline.close()
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, InvalidArgumentError) as e:
        print(f"配置错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"找不到文件: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FGNOError, RuntimeError, ArithmeticError, OSError) as e:
        print(f"运行错误: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
