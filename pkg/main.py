import argparse
import json
import logging
import math
import os
import sys

import modules.bench as bench
import modules.config as config
import modules.simulator as simulator
from modules.errors import ConfigError, MapError, RenderabilityError
from modules.fibsphere import build_fov_sets, build_lattice
from modules.geometry import Intrinsics
from modules.planner import score_pose
from modules.snapshot import load_snapshot, save_snapshot
from modules.world_map import distance_field

logger = logging.getLogger('renderability')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
TIMING_COLUMNS = ('step', 'ingest_ms', 'plan_ms', 'voxels', 'new_voxels')
SCORE_COLUMNS = ('pose', 'status', 'u_g', 'u_r', 'u_path', 'u_view', 'mean_r', 'pano_mean_r', 'n_visible')
EVAL_COLUMNS = ('view', 'x', 'y', 'z', 'dx', 'dy', 'dz', 'n_visible', 'mean_r', 'mean_deficit', 'mse', 'psnr')


class UsageError(Exception):
	pass


class ArgumentParser(argparse.ArgumentParser):
	"""argparse that reports usage errors as exit code 1."""

	def error(self, message):
		self.print_usage(sys.stderr)
		self.exit(1, f"{self.prog}: error: {message}\n")


def write_json(path, payload):
	with open(path, 'w', encoding='utf-8') as f:
		json.dump(payload, f, indent=2, sort_keys=True)
		f.write('\n')


def _vector(text):
	try:
		values = [float(v) for v in text.split(',')]
	except ValueError:
		raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
	if len(values) != 3:
		raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
	return values


def _int_list(text):
	try:
		return [int(v) for v in text.split(',') if v.strip()]
	except ValueError:
		raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")


def _load(args):
	cfg = config.load_config(args.config, args.set)
	if getattr(args, 'out', None):
		cfg.output_dir = args.out
	return cfg


def _lattices(cfg):
	lattice = build_lattice(n_bins=cfg.lattice.n_bins)
	pano = build_lattice(theta_res=math.radians(cfg.lattice.pano_theta_deg))
	pano = build_fov_sets(pano, math.radians(cfg.planner.half_angle_deg))
	return lattice, pano


def _intrinsics(cfg):
	fov = math.radians(cfg.camera.fov_deg)
	return Intrinsics.from_fov(cfg.camera.width, cfg.camera.height, fov, fov)


def _scene(cfg, name=None):
	"""A scene from a file path, a preset name, or the config."""
	source = name or cfg.scene.path
	if source and os.path.isfile(source):
		return simulator.read_scene(source)
	return simulator.build_scene(source or cfg.scene.preset, seed=cfg.scene.seed, voxel_size=cfg.map.voxel_size)


def cmd_run(args):
	cfg = _load(args)
	digest = config.config_hash(cfg)
	tag = f"config_hash={digest}"
	scene = _scene(cfg)
	lattice, pano = _lattices(cfg)
	world = simulator.world_for_scene(scene, lattice, cfg.map.cell_size, cfg.map.max_range)
	budget = simulator.Budget(cfg.budget.max_views, cfg.budget.max_seconds)
	out = cfg.output_dir
	os.makedirs(out, exist_ok=True)
	logger.info("run %s on %s -> %s", digest, scene.name, out)

	with open(os.path.join(out, 'planner_log.jsonl'), 'w', encoding='utf-8') as log:
		log.write(json.dumps({'config_hash': digest}) + '\n')
		result = simulator.run_episode(scene, world, cfg.planner_config(), _intrinsics(cfg), budget,
									   pano_lattice=pano, capture_every=cfg.budget.capture_every,
									   workers=cfg.map.workers, log=log)

	simulator.write_rows(os.path.join(out, 'trajectory.csv'), result.steps, simulator.TRAJECTORY_COLUMNS, comment=tag)
	simulator.write_rows(os.path.join(out, 'timings.csv'), result.timings, TIMING_COLUMNS, comment=tag)
	snap = save_snapshot(world, os.path.join(out, 'map.snap'))
	scene_path = os.path.join(out, 'scene.txt')
	simulator.write_scene(scene, scene_path)
	with open(scene_path, 'a') as f:
		f.write(f"# {tag}\n")
	report = {
		'config_hash': digest,
		'config': config.to_dict(cfg),
		'metrics': result.metrics,
		'snapshot': snap,
	}
	write_json(os.path.join(out, 'metrics.json'), report)
	print(json.dumps(result.metrics, indent=2))
	return 0


def cmd_score(args):
	cfg = _load(args)
	digest = config.config_hash(cfg)
	lattice, pano = _lattices(cfg)
	world = load_snapshot(args.snapshot, lattice)
	poses = simulator.read_poses(args.poses)
	pcfg = cfg.planner_config()

	field = None
	origin = args.origin if args.origin is not None else (poses[0].position if poses else None)
	if origin is not None:
		try:
			field = distance_field(world, origin)
		except MapError as exc:
			logger.warning("no path costs: %s", exc)

	rows = []
	for i, pose in enumerate(poses):
		row = score_pose(world, pose.position, pose.axis, pcfg, origin_field=field, pano_lattice=pano)
		row['pose'] = i
		rows.append(row)
	out = args.out or os.path.join(cfg.output_dir, 'scores.csv')
	os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
	simulator.write_rows(out, rows, SCORE_COLUMNS, comment=f"config_hash={digest}")
	logger.info("scored %d poses -> %s", len(rows), out)
	return 0


def cmd_eval(args):
	cfg = _load(args)
	if args.grid_step is not None:
		cfg.eval.grid_step = args.grid_step
	if args.prefixes is not None:
		cfg.eval.prefixes = args.prefixes
	digest = config.config_hash(cfg)
	if cfg.eval.prefixes and not args.trajectory:
		raise UsageError("--prefixes needs --trajectory")
	scene = _scene(cfg, args.scene)
	lattice, _ = _lattices(cfg)
	world = load_snapshot(args.snapshot, lattice)
	intr = _intrinsics(cfg)
	test_poses = simulator.eval_grid_poses(scene, cfg.eval.grid_step, world.cell_size)
	report = simulator.eval_novel_views(scene, world, test_poses, intr)

	out = cfg.output_dir
	os.makedirs(out, exist_ok=True)
	tag = f"config_hash={digest}"
	simulator.write_rows(os.path.join(out, 'eval_views.csv'), report['views'], EVAL_COLUMNS, comment=tag)
	summary = {'config_hash': digest, 'scene': scene.name, 'test_views': len(test_poses), **report['summary']}

	if cfg.eval.prefixes:
		trajectory = simulator.read_poses(args.trajectory)

		def make_world():
			return simulator.world_for_scene(scene, lattice, world.cell_size, world.max_range)

		by_prefix = simulator.eval_prefixes(scene, trajectory, make_world, test_poses, intr, cfg.eval.prefixes)
		rows = [dict(view, prefix=k) for k, rep in by_prefix.items() for view in rep['views']]
		simulator.write_rows(os.path.join(out, 'eval_prefix_views.csv'), rows, ('prefix',) + EVAL_COLUMNS, comment=tag)
		summary['prefixes'] = {str(k): rep['summary'] for k, rep in by_prefix.items()}

	write_json(os.path.join(out, 'eval_summary.json'), summary)
	print(json.dumps(summary, indent=2))
	return 0


def cmd_bench(args):
	cfg = _load(args)
	digest = config.config_hash(cfg)
	b = cfg.bench
	report = bench.run_bench(n_bins=cfg.lattice.n_bins, voxel_counts=b.voxel_counts, keyframe_counts=b.keyframe_counts,
							 keyframe_voxels=b.keyframe_voxels, repeats=b.repeats, workers=b.workers, seed=cfg.seed)
	out = cfg.output_dir
	os.makedirs(out, exist_ok=True)
	tag = f"config_hash={digest}"
	simulator.write_rows(os.path.join(out, 'bench_query.csv'), report['query'], bench.QUERY_COLUMNS, comment=tag)
	simulator.write_rows(os.path.join(out, 'bench_keyframes.csv'), report['keyframes'], bench.KEYFRAME_COLUMNS, comment=tag)
	summary = dict(report['summary'], config_hash=digest)
	write_json(os.path.join(out, 'bench.json'), summary)
	print(json.dumps(summary, indent=2))
	return 0


def cmd_lattice_info(args):
	cfg = _load(args)
	lattice, pano = _lattices(cfg)
	print(json.dumps({'voxel_lattice': lattice.info(), 'panoramic_lattice': pano.info()}, indent=2))
	return 0


def build_arg_parser():
	parser = ArgumentParser(prog='renderability', description="Renderability-driven next-best-view planning")
	parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument('--config', default=None, help="JSON run configuration")
	common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
						help="override one config key; the value is parsed as JSON when possible")
	sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

	p = sub.add_parser('run', parents=[common], help="run one planning episode")
	p.add_argument('--out', default=None, help="output directory (overrides output_dir)")
	p.set_defaults(func=cmd_run)

	p = sub.add_parser('score', parents=[common], help="score poses against a map snapshot")
	p.add_argument('--snapshot', required=True)
	p.add_argument('--poses', required=True, help="CSV with x,y,z,dx,dy,dz columns")
	p.add_argument('--from', dest='origin', type=_vector, default=None, help="path origin x,y,z; first pose by default")
	p.add_argument('--out', default=None, help="scores CSV path")
	p.set_defaults(func=cmd_score)

	p = sub.add_parser('eval', parents=[common], help="novel-view error against renderability")
	p.add_argument('--snapshot', required=True)
	p.add_argument('--scene', default=None, help="preset name or scene file")
	p.add_argument('--grid-step', type=int, default=None)
	p.add_argument('--trajectory', default=None, help="trajectory CSV for prefix evaluation")
	p.add_argument('--prefixes', type=_int_list, default=None, help="e.g. 5,10,15,20")
	p.add_argument('--out', default=None)
	p.set_defaults(func=cmd_eval)

	p = sub.add_parser('bench', parents=[common], help="latency and memory benchmark")
	p.add_argument('--out', default=None)
	p.set_defaults(func=cmd_bench)

	p = sub.add_parser('lattice-info', parents=[common], help="print lattice sizes and FoV set sizes")
	p.set_defaults(func=cmd_lattice_info)
	return parser


def main(argv=None):
	parser = build_arg_parser()
	args = parser.parse_args(argv)
	logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
	try:
		return args.func(args)
	except (ConfigError, UsageError) as e:
		print(f"error: {e}", file=sys.stderr)
		return 1
	except (RenderabilityError, OSError) as e:
		print(f"error: {e}", file=sys.stderr)
		return 2


if __name__ == '__main__':
	sys.exit(main())
