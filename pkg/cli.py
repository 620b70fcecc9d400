# -*- coding: utf-8 -*-
"""
命令行入口
    python cli.py gen-data --out data --profile desk
    python cli.py train --data data --out runs/gen --profile desk
    python cli.py sample --ckpt runs/gen/best --text "pick up the apple ..." --out out/sample
    python cli.py compose --ckpt runs/seg/best --script script.json --k 10 --out out/timeline
    python cli.py eval --data data --ckpt runs/gen/best --out report.json
    python cli.py fit --markers capture.bin --out fit.bin
    python cli.py serve
每个命令成功时打印一行 JSON 摘要；出错时打印 {"ok": false, "error": {...}}，退出码 2
"""

import argparse
import json
import logging
import os
import sys

from archive import write_archive
from composer import TimelineScript, compose_timeline, load_run, sample_sequence, scene_for
from config import load_config, parse_overrides
from corpus import SPLITS, CorpusManifest, HoiDataset, generate_synthetic_corpus
from errors import HoiError, SegmentFailure
from evalsuite import evaluate_generated, load_extractors, save_extractors, train_extractors
from rigid_fit import fit_markers_file
from trainer import train

logger = logging.getLogger(__name__)


def setup_logging(level='INFO'):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def _overrides(args, **extra):
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides['seed'] = args.seed
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return overrides


def _config(args, **extra):
    return load_config(profile=args.profile, path=args.config, overrides=_overrides(args, **extra))


def _objects(value):
    return [v.strip() for v in value.split(',') if v.strip()] if value else None


# ---------------------------------------------------------------------------
# 命令
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args, num_sequences=args.num, num_objects=args.objects)
    manifest = generate_synthetic_corpus(cfg, args.out)
    counts = {split: len(manifest.ids_for(split)) for split in SPLITS}
    return {'out': args.out, 'sequences': len(manifest.ids), 'splits': counts, 'config': cfg.fingerprint()}


def cmd_train(args):
    manifest = CorpusManifest.load(args.data)
    cfg = _config(args, train_mode=args.mode, max_steps=args.steps, epochs=args.epochs,
                  overfit=True if args.overfit else None)
    result = train(cfg, manifest, args.out, resume=args.resume, progress=args.progress)
    return {'out': result.out_dir, 'last': result.last_checkpoint, 'best': result.best_checkpoint,
            'epochs': result.epochs, 'steps': result.steps, 'final_loss': result.final_loss,
            'best_val': result.best_val, 'config': cfg.fingerprint()}


def cmd_sample(args):
    run = load_run(args.ckpt, _overrides(args, generation=args.mode))
    cfg = run.config
    frames = args.frames or (cfg.max_motion_len if cfg.train_mode == 'gen' else cfg.segment_length)
    init, geometries = scene_for(cfg, _objects(args.objects), args.data, args.seq, cfg.cond_frames, cfg.seed)
    seq = sample_sequence(run, args.text, frames, init, geometries, seed=cfg.seed,
                          guidance_scale=args.guidance, seq_id=os.path.basename(os.path.normpath(args.out)))
    write_archive(seq, args.out, {'run_config': cfg.to_dict(), 'fingerprint': cfg.fingerprint(),
                                  'checkpoint': args.ckpt, 'seed': cfg.seed, 'generation': cfg.generation})
    return {'out': args.out, 'frames': seq.num_frames, 'objects': seq.object_names, 'mode': cfg.generation,
            'config': cfg.fingerprint()}


def cmd_compose(args):
    run = load_run(args.ckpt, _overrides(args, overlap_frames=args.k))
    cfg = run.config
    script = TimelineScript.from_json(args.script, k=cfg.overlap_frames, default_length=cfg.segment_length)
    init, geometries = scene_for(cfg, _objects(args.objects), args.data, args.seq, 1, cfg.seed)
    generator = run.generator(geometries, args.guidance, cfg.max_seg_text_len)
    seq_id = os.path.basename(os.path.normpath(args.out))
    try:
        timeline = compose_timeline(generator, script, init, seed=cfg.seed)
    except SegmentFailure as e:
        if e.partial is not None:
            partial_dir = args.out + '.partial'
            write_archive(e.partial.to_sequence(seq_id, cfg.num_joints, geometries, cfg.fps), partial_dir,
                          {'run_config': cfg.to_dict(), 'fingerprint': cfg.fingerprint(), 'partial': True})
            e.details['partial'] = partial_dir
        raise
    seq = timeline.to_sequence(seq_id, cfg.num_joints, geometries, cfg.fps)
    write_archive(seq, args.out, {'run_config': cfg.to_dict(), 'fingerprint': cfg.fingerprint(),
                                  'checkpoint': args.ckpt, 'seed': cfg.seed, 'k': script.k,
                                  'boundaries': timeline.boundaries, 'transition_jerk': timeline.transition_jerk})
    return {'out': args.out, 'frames': timeline.num_frames, 'segments': len(script.prompts), 'k': script.k,
            'transition_jerk': timeline.transition_jerk, 'config': cfg.fingerprint()}


def cmd_eval(args):
    manifest = CorpusManifest.load(args.data)
    if args.ckpt:
        run = load_run(args.ckpt, _overrides(args, repetitions=args.reps))
        cfg, model, schedule = run.config, run.model, run.schedule
    else:
        cfg = _config(args, repetitions=args.reps)
        model = schedule = None
    if args.extractors:
        extractors, _ = load_extractors(args.extractors)
    else:
        logger.info('no extractors given, training them on the train split')
        extractors = train_extractors(HoiDataset(manifest, 'train'), cfg, seed=cfg.seed, progress=args.progress)
        save_extractors(extractors, os.path.join(os.path.dirname(os.path.abspath(args.out)), 'extractors'),
                        {'run_config': cfg.to_dict()})
    dataset = HoiDataset(manifest, args.split)
    report = evaluate_generated(model, extractors, dataset, cfg, schedule, seed=cfg.seed, progress=args.progress)
    report.save(args.out)
    summary = {name: round(stats['mean'], 6) for name, stats in report.generated.items()}
    return {'out': args.out, 'split': args.split, 'metrics': summary, 'config': cfg.fingerprint()}


def cmd_fit(args):
    cfg = _config(args, body_model=args.model)
    _, summary = fit_markers_file(args.markers, cfg, args.out, progress=args.progress)
    return summary


def cmd_serve(args):
    from app import app
    port = args.port or int(os.environ.get('PORT', 5000))
    app.run(host=args.host, port=port, debug=False)
    return {'port': port}


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'sample': cmd_sample,
    'compose': cmd_compose,
    'eval': cmd_eval,
    'fit': cmd_fit,
    'serve': cmd_serve,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--config', default=None, help='JSON 配置文件 (扁平 key/value)')
    common.add_argument('--profile', default=None, help='desk 或 fidelity')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    common.add_argument('--log-level', default='INFO')
    common.add_argument('--progress', action='store_true', help='显示 tqdm 进度条')

    parser = argparse.ArgumentParser(prog='hoi', description='文本驱动的多物体人物交互合成工具')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='生成合成语料')
    p.add_argument('--out', required=True)
    p.add_argument('--num', type=int, default=None)
    p.add_argument('--objects', type=int, default=None)

    p = sub.add_parser('train', parents=[common], help='训练去噪网络')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--mode', choices=['gen', 'seg'], default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--steps', type=int, default=None, help='最多训练多少步')
    p.add_argument('--overfit', action='store_true', help='反复训练同一个 batch')
    p.add_argument('--resume', action='store_true')

    p = sub.add_parser('sample', parents=[common], help='单段文本生成')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--text', required=True)
    p.add_argument('--frames', type=int, default=None)
    p.add_argument('--objects', default=None, help='逗号分隔的物体名')
    p.add_argument('--data', default=None, help='从语料取初始状态')
    p.add_argument('--seq', default=None)
    p.add_argument('--guidance', type=float, default=None)
    p.add_argument('--mode', choices=['joint', 'consecutive'], default=None,
                   help='consecutive: 先采物体运动，再以它为条件采人体')
    p.add_argument('--out', required=True)

    p = sub.add_parser('compose', parents=[common], help='按脚本分段生成长序列')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--script', required=True)
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--objects', default=None)
    p.add_argument('--data', default=None)
    p.add_argument('--seq', default=None)
    p.add_argument('--guidance', type=float, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', parents=[common], help='评估指标')
    p.add_argument('--data', required=True)
    p.add_argument('--ckpt', default=None, help='不给时真实数据对自己')
    p.add_argument('--extractors', default=None)
    p.add_argument('--split', choices=list(SPLITS), default='test')
    p.add_argument('--reps', type=int, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser('fit', parents=[common], help='标记点拟合')
    p.add_argument('--markers', required=True)
    p.add_argument('--model', default=None, help='toy 或 toy52')
    p.add_argument('--out', required=True)

    p = sub.add_parser('serve', parents=[common], help='启动 HTTP 服务')
    p.add_argument('--host', default='0.0.0.0')
    p.add_argument('--port', type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        summary = COMMANDS[args.command](args)
    except HoiError as e:
        print(json.dumps({'ok': False, 'command': args.command, 'error': e.to_dict()}, ensure_ascii=False))
        return 2
    except Exception as e:
        logger.exception('unexpected failure in %s', args.command)
        print(json.dumps({'ok': False, 'command': args.command,
                          'error': {'code': 'internal', 'message': str(e)}}, ensure_ascii=False))
        return 1
    print(json.dumps({'ok': True, 'command': args.command, **summary}, ensure_ascii=False, default=str))
    return 0


if __name__ == '__main__':
    sys.exit(main())
