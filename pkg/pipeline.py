"""
Batch stage runners for the scene data engine.

Each `cmd_*` function processes every scene found under the configured
input directory and writes its outputs to `<output_dir>/<scene_name>/`.
Scenes run in parallel up to `config.jobs`; the steps of one scene run
sequentially.
"""

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

import io_formats
from config import ERROR_MESSAGES, PipelineConfig
from curation import FrameDescriptor, FrameTrack, curate_sequence
from exceptions import DataFormatError, GeometryError, MetricError, SceneEngineError
from geometry import DepthMap, GroundPose, Intrinsics, ground_pose
from instance_lifter import FrameMaskSet, FrameObservation, Instance3D, lift_scene
from metrics import (Detection, DetectionSet, EpisodeResult, detection_report, nav_metrics,
                     path_length)
from navigation import ActionStep, NavEpisode, build_episodes, episode_statistics, replay_actions
from reconstruction import (SparseCloud, clean_mesh, extract_mesh,
                            fuse_depth_frames, sparse_depth_prior)
from scene_graph import SceneGraph, build_graph
from synth_world import SceneSpec, gen_scene, write_dataset
from vqa_generator import GenConfig, QaItem, VqaEngine, evaluate_predictions, qa_statistics

logger = logging.getLogger(__name__)

EVAL_KINDS = ("vln", "vqa", "det")


class ScenePipeline:
    """
    Per-scene stage steps driven by one PipelineConfig.

    Inputs are read from the scene directory, stage outputs from and to the
    matching directory under the output root, so every stage can be re-run
    on its own.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.output_root = Path(config.output_dir)

    def output_dir(self, scene_dir: Path) -> Path:
        return self.output_root / Path(scene_dir).name

    # Input loading

    def _frames(self, scene_dir: Path):
        poses = io_formats.read_pose_file(scene_dir / io_formats.POSE_FILE)
        k = io_formats.read_intrinsics(scene_dir / io_formats.INTRINSICS_FILE)
        if not poses:
            raise DataFormatError("Pose file lists no frames.", path=str(scene_dir / io_formats.POSE_FILE))
        return poses, k

    def _depth(self, scene_dir: Path, frame_id: int, k: Intrinsics) -> DepthMap:
        path = io_formats.frame_image_path(scene_dir, "depth", frame_id)
        depth = io_formats.read_depth_png(path)
        if (depth.width, depth.height) != (k.width, k.height):
            raise DataFormatError(
                f"Depth is {depth.width}x{depth.height}, intrinsics expect {k.width}x{k.height}", path=str(path)
            )
        return depth

    def _labels(self, scene_dir: Path, frame_id: int, k: Intrinsics) -> np.ndarray:
        path = io_formats.frame_image_path(scene_dir, "mask", frame_id)
        labels = io_formats.read_label_png(path)
        if labels.shape != (k.height, k.width):
            raise DataFormatError("Mask size does not match the intrinsics", path=str(path))
        return labels

    def load_instances(self, scene_dir: Path) -> List[Instance3D]:
        """Instances of a scene with their point clouds, from segment outputs."""
        out_dir = self.output_dir(scene_dir)
        records = io_formats.read_json(out_dir / io_formats.INSTANCES_FILE)
        instances = []
        for record in records:
            cloud_path = out_dir / io_formats.INSTANCE_CLOUD_PATTERN.format(instance_id=int(record["id"]))
            points, _ = io_formats.read_ply(cloud_path)
            instances.append(Instance3D.from_dict(record, points))
        return instances

    def load_graph(self, scene_dir: Path) -> SceneGraph:
        instances = self.load_instances(scene_dir)
        graph_path = io_formats.optional_file(self.output_dir(scene_dir) / io_formats.SCENE_GRAPH_FILE)
        if graph_path is None:
            logger.warning(f"{Path(scene_dir).name}: no scene graph on disk, building one from instances")
            return build_graph(instances, None, self.config.scenegraph.vertical_epsilon,
                               self.config.scenegraph.near_threshold)
        return SceneGraph.from_dict(io_formats.read_json(graph_path), instances)

    def load_episodes(self, scene_dir: Path) -> List[NavEpisode]:
        path = io_formats.optional_file(self.output_dir(scene_dir) / io_formats.EPISODES_FILE)
        if path is None:
            return []
        return [NavEpisode.from_dict(record) for record in io_formats.iter_jsonl(path)]

    # Stage steps

    def reconstruct(self, scene_dir: Path) -> List[Path]:
        """Fuse depth into a TSDF, extract and clean the mesh, write sparse depth priors."""
        params = self.config.reconstruction
        poses, k = self._frames(scene_dir)
        frames = [(self._depth(scene_dir, pose.frame_id, k), pose, k) for pose in poses]

        volume = fuse_depth_frames(frames, params.voxel_size, params.truncation_multiplier,
                                   params.max_weight, params.max_depth)
        mesh = extract_mesh(volume)
        if mesh.is_empty:
            logger.warning(f"{scene_dir.name}: TSDF has no surface crossing, mesh is empty")
        else:
            mesh = clean_mesh(mesh, params.filter_radius, params.filter_min_neighbors,
                              params.filter_k, params.filter_std_ratio)

        out_dir = self.output_dir(scene_dir)
        written = [
            io_formats.write_mesh_ply(out_dir / io_formats.MESH_FILE, mesh.vertices, mesh.triangles),
            io_formats.write_point_cloud_ply(out_dir / io_formats.FUSED_CLOUD_FILE, mesh.vertices),
        ]

        sparse_path = io_formats.optional_file(scene_dir / io_formats.SPARSE_CLOUD_FILE)
        if params.write_priors and sparse_path is not None:
            points, _ = io_formats.read_ply(sparse_path)
            cloud = SparseCloud(points)
            for pose in poses:
                prior = sparse_depth_prior(cloud, pose, k)
                path = out_dir / io_formats.PRIORS_DIR / io_formats.DEPTH_FILE_PATTERN.format(frame_id=pose.frame_id)
                written.append(io_formats.write_depth_png(path, prior))
        logger.info(f"{scene_dir.name}: mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
        return written

    def segment(self, scene_dir: Path) -> List[Path]:
        """Lift per-frame masks to 3D instances."""
        params = self.config.segmentation
        poses, k = self._frames(scene_dir)
        categories_path = io_formats.optional_file(scene_dir / io_formats.CATEGORIES_FILE)
        categories = io_formats.read_categories(categories_path) if categories_path else {}
        if not categories:
            logger.warning(f"{scene_dir.name}: no mask categories, instances stay uncategorized")

        observations = []
        for pose in poses:
            frame_categories = {label: cat for (fid, label), cat in categories.items() if fid == pose.frame_id}
            masks = FrameMaskSet(pose.frame_id, self._labels(scene_dir, pose.frame_id, k), frame_categories)
            observations.append(FrameObservation(pose.frame_id, self._depth(scene_dir, pose.frame_id, k),
                                                 pose, masks))

        instances = lift_scene(observations, k, params.min_pixels, params.neighbor_window,
                               params.merge_threshold, params.iou_threshold,
                               params.min_instance_points, params.voxel_size)

        out_dir = self.output_dir(scene_dir)
        written = [io_formats.write_json(out_dir / io_formats.INSTANCES_FILE, [inst.to_dict() for inst in instances])]
        for inst in instances:
            path = out_dir / io_formats.INSTANCE_CLOUD_PATTERN.format(instance_id=inst.instance_id)
            written.append(io_formats.write_point_cloud_ply(path, inst.points))
        return written

    def scene_graph(self, scene_dir: Path) -> List[Path]:
        """Build the scene graph; the room extent comes from the mesh when present."""
        params = self.config.scenegraph
        instances = self.load_instances(scene_dir)
        out_dir = self.output_dir(scene_dir)
        mesh_path = io_formats.optional_file(out_dir / io_formats.MESH_FILE)
        scene_points = io_formats.read_ply(mesh_path)[0] if mesh_path else None
        if scene_points is None:
            logger.warning(f"{scene_dir.name}: no mesh, room extent falls back to instance boxes")
        graph = build_graph(instances, scene_points, params.vertical_epsilon, params.near_threshold)
        return [io_formats.write_json(out_dir / io_formats.SCENE_GRAPH_FILE, graph.to_dict())]

    def gen_vln(self, scene_dir: Path) -> List[Path]:
        """Turn the camera trajectory into navigation episodes."""
        params = self.config.vln
        poses, _ = self._frames(scene_dir)
        trajectory: List[GroundPose] = []
        for pose in poses:
            try:
                trajectory.append(ground_pose(pose))
            except GeometryError as e:
                logger.warning(f"{scene_dir.name}: skipping frame {pose.frame_id}: {e.message}")

        anchors = []
        anchors_path = io_formats.optional_file(scene_dir / io_formats.ANCHORS_FILE)
        if params.calibrate and anchors_path is not None:
            data = io_formats.read_json(anchors_path)
            try:
                anchors = [(float(mono), float(sfm)) for mono, sfm in data["anchors"]]
            except (KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"Invalid anchors: {e}", path=str(anchors_path))

        instances: List[Instance3D] = []
        if io_formats.optional_file(self.output_dir(scene_dir) / io_formats.INSTANCES_FILE):
            instances = self.load_instances(scene_dir)
        else:
            logger.warning(f"{scene_dir.name}: no instances, summaries carry no landmarks")

        episodes = build_episodes(scene_dir.name, trajectory, instances, anchors,
                                  params.cluster_radius, params.split_min_steps, params.max_rotation,
                                  params.max_translation, params.lookaround_deviation,
                                  params.landmark_radius)
        logger.info(f"{scene_dir.name}: episode statistics {episode_statistics(episodes)}")
        path = self.output_dir(scene_dir) / io_formats.EPISODES_FILE
        return [io_formats.write_jsonl(path, [ep.to_dict() for ep in episodes])]

    def gen_vqa(self, scene_dir: Path) -> List[Path]:
        """Generate spatial questions from the scene graph and episodes."""
        params = self.config.vqa
        graph = self.load_graph(scene_dir)
        episodes = self.load_episodes(scene_dir)
        if not episodes:
            logger.warning(f"{scene_dir.name}: no episodes, route planning questions are skipped")
        cfg = GenConfig(seed=self.config.seed, caps=dict(params.caps), min_margin_m=params.min_margin_m,
                        direction_deadzone_deg=params.direction_deadzone_deg)
        items = VqaEngine().generate(scene_dir.name, graph, episodes, cfg)

        out_dir = self.output_dir(scene_dir)
        meta = {"scene_id": scene_dir.name, "seed": self.config.seed, "statistics": qa_statistics(items)}
        return [
            io_formats.write_jsonl(out_dir / io_formats.QA_FILE, [item.to_dict() for item in items]),
            io_formats.write_json(out_dir / io_formats.QA_META_FILE, meta),
        ]

    def curate(self, scene_dir: Path) -> List[Path]:
        """Keyframes, clips and pair proposals from tracked features."""
        params = self.config.curation
        k = io_formats.read_intrinsics(scene_dir / io_formats.INTRINSICS_FILE)
        tracks = [FrameTrack.from_dict(r) for r in io_formats.iter_jsonl(scene_dir / io_formats.TRACKS_FILE)]
        descriptors = []
        descriptors_path = io_formats.optional_file(scene_dir / io_formats.DESCRIPTORS_FILE)
        if descriptors_path is not None:
            descriptors = [FrameDescriptor(int(r["frame_id"]), r["vector"])
                           for r in io_formats.iter_jsonl(descriptors_path)]
        result = curate_sequence(tracks, k.width, k.height, descriptors,
                                 params.parallax_threshold, params.min_shared_tracks,
                                 params.sequence_window, params.clip_max_len, params.clip_overlap,
                                 params.loop_window, params.loop_top_k, params.loop_score_threshold,
                                 params.loop_mode)
        return [io_formats.write_json(self.output_dir(scene_dir) / io_formats.CURATION_FILE, result.to_dict())]

    def run_enabled(self, scene_dir: Path) -> List[Path]:
        """Run every enabled stage of one scene in pipeline order."""
        toggles = self.config.stages
        steps = [
            (toggles.reconstruct, self.reconstruct),
            (toggles.segment, self.segment),
            (toggles.scenegraph, self.scene_graph),
            (toggles.gen_vln, self.gen_vln),
            (toggles.gen_vqa, self.gen_vqa),
        ]
        written: List[Path] = []
        for enabled, step in steps:
            if enabled:
                written.extend(step(scene_dir))
        return written


def _run_stage(stage: str, config: PipelineConfig,
               step: Callable[[ScenePipeline], Callable[[Path], List[Path]]]) -> List[Path]:
    """Run one step over every scene, in parallel up to config.jobs."""
    try:
        pipeline = ScenePipeline(config)
        scenes = io_formats.find_scene_dirs(config.input_dir)
        if not scenes:
            raise DataFormatError("No scene directories found.", path=str(config.input_dir))
        logger.info(f"Stage {stage}: {len(scenes)} scene(s), {config.jobs} job(s)")
        results = Parallel(n_jobs=config.jobs)(delayed(step(pipeline))(scene) for scene in scenes)
        return [path for written in results for path in written]
    except SceneEngineError:
        raise
    except Exception as e:
        logger.error(f"Error in stage {stage}: {e}")
        raise SceneEngineError(ERROR_MESSAGES["stage_error"].format(stage=stage))


def cmd_reconstruct(config: PipelineConfig) -> List[Path]:
    return _run_stage("reconstruct", config, lambda p: p.reconstruct)


def cmd_segment(config: PipelineConfig) -> List[Path]:
    return _run_stage("segment", config, lambda p: p.segment)


def cmd_scenegraph(config: PipelineConfig) -> List[Path]:
    return _run_stage("scenegraph", config, lambda p: p.scene_graph)


def cmd_gen_vqa(config: PipelineConfig) -> List[Path]:
    return _run_stage("gen-vqa", config, lambda p: p.gen_vqa)


def cmd_gen_vln(config: PipelineConfig) -> List[Path]:
    return _run_stage("gen-vln", config, lambda p: p.gen_vln)


def cmd_curate(config: PipelineConfig) -> List[Path]:
    return _run_stage("curate", config, lambda p: p.curate)


def cmd_run(config: PipelineConfig) -> List[Path]:
    """All enabled stages, scene by scene."""
    return _run_stage("run", config, lambda p: p.run_enabled)


def cmd_synth(config: PipelineConfig) -> List[Path]:
    """
    Write `num_scenes` synthetic scenes with seeds seed, seed+1, ...

    Returns:
        The scene directories, in seed order
    """
    params = config.synth
    seeds = [config.seed + i for i in range(params.num_scenes)]

    def build(seed: int) -> Path:
        spec = gen_scene(seed, tuple(params.object_count), num_views=params.num_views)
        return write_dataset(spec, config.output_dir, params.width, params.height, params.max_range, seed)

    try:
        scene_dirs = Parallel(n_jobs=config.jobs)(delayed(build)(seed) for seed in seeds)
    except SceneEngineError:
        raise
    except Exception as e:
        logger.error(f"Error in stage synth: {e}")
        raise SceneEngineError(ERROR_MESSAGES["stage_error"].format(stage="synth"))

    meta = {"seed": config.seed, "num_scenes": params.num_scenes,
            "scenes": [Path(d).name for d in scene_dirs]}
    io_formats.write_json(Path(config.output_dir) / io_formats.SYNTH_META_FILE, meta)
    return list(scene_dirs)


# Evaluation

def _prediction_records(predictions: Optional[str]) -> List[Dict[str, Any]]:
    if not predictions:
        raise DataFormatError("A predictions file is required for evaluation.")
    return io_formats.read_jsonl(predictions)


def _scene_outputs(config: PipelineConfig, name: str) -> List[Path]:
    """Existing per-scene output files of one kind, in scene order."""
    root = Path(config.output_dir)
    if not root.is_dir():
        raise DataFormatError("Output directory not found.", path=str(root))
    return sorted(p / name for p in root.iterdir() if (p / name).is_file())


def _executed_path(episode: NavEpisode, record: Optional[Dict[str, Any]]) -> List[GroundPose]:
    if record is None:
        logger.warning(f"No prediction for episode {episode.episode_id}, counted as staying at the start")
        return [episode.start]
    if "path" in record:
        return [GroundPose.from_list(p) for p in record["path"]]
    if "actions" in record:
        return replay_actions(episode.start, [ActionStep.from_dict(a) for a in record["actions"]])
    raise DataFormatError(f"Prediction for {episode.episode_id} has neither 'path' nor 'actions'")


def evaluate_vln(config: PipelineConfig, records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    by_id = {str(r["episode_id"]): r for r in records if "episode_id" in r}
    results = []
    for path in _scene_outputs(config, io_formats.EPISODES_FILE):
        for record in io_formats.iter_jsonl(path):
            episode = NavEpisode.from_dict(record)
            shortest = path_length(episode.gt_path)
            if shortest <= 0:
                logger.warning(f"Episode {episode.episode_id} has no translation, excluded")
                continue
            goal = episode.gt_path[-1].position
            results.append(EpisodeResult(_executed_path(episode, by_id.get(episode.episode_id)),
                                         (float(goal[0]), float(goal[1])), shortest, episode.episode_id))
    if not results:
        raise MetricError("No episodes found to evaluate.", path=str(config.output_dir))
    return nav_metrics(results, config.evaluation.success_radius).to_dict()


def evaluate_vqa(config: PipelineConfig, records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    predictions = {str(r["id"]): r.get("prediction") for r in records if "id" in r}
    items = [QaItem.from_dict(record)
             for path in _scene_outputs(config, io_formats.QA_FILE)
             for record in io_formats.iter_jsonl(path)]
    return evaluate_predictions(predictions, items)


def _ground_truth_boxes(config: PipelineConfig, ground_truth: Optional[str]) -> DetectionSet:
    """Ground-truth boxes from a JSONL file, or from the scene specs of the input scenes."""
    if ground_truth:
        return DetectionSet([Detection.from_dict(r) for r in io_formats.iter_jsonl(ground_truth)])
    boxes = []
    for scene_dir in io_formats.find_scene_dirs(config.input_dir):
        spec = SceneSpec.from_dict(io_formats.read_json(scene_dir / io_formats.SCENE_SPEC_FILE))
        boxes.extend(Detection(aabb=obj.aabb, category=obj.category,
                               scene_id=scene_dir.name) for obj in spec.objects)
    return DetectionSet(boxes)


def evaluate_det(config: PipelineConfig, records: Sequence[Dict[str, Any]],
                 ground_truth: Optional[str] = None) -> Dict[str, Any]:
    pred = DetectionSet([Detection.from_dict(r) for r in records])
    gt = _ground_truth_boxes(config, ground_truth)
    return detection_report(pred, gt, config.evaluation.iou_thresholds)


def cmd_eval(config: PipelineConfig, predictions: Optional[str], kind: str = "vqa",
             ground_truth: Optional[str] = None) -> Dict[str, Any]:
    """
    Score predictions against the generated data and write the report.

    Args:
        config: Pipeline configuration; outputs are read from config.output_dir
        predictions: JSONL predictions file
        kind: "vln", "vqa" or "det"
        ground_truth: Optional JSONL ground-truth boxes for "det"

    Returns:
        The metric report, also written to `<output_dir>/eval_<kind>.json`
    """
    if kind not in EVAL_KINDS:
        raise MetricError(f"Unknown evaluation kind '{kind}'")
    try:
        records = _prediction_records(predictions)
        if kind == "vln":
            report = evaluate_vln(config, records)
        elif kind == "vqa":
            report = evaluate_vqa(config, records)
        else:
            report = evaluate_det(config, records, ground_truth)
    except SceneEngineError:
        raise
    except Exception as e:
        logger.error(f"Error in stage eval-{kind}: {e}")
        raise SceneEngineError(ERROR_MESSAGES["stage_error"].format(stage=f"eval-{kind}"))

    io_formats.write_json(Path(config.output_dir) / io_formats.EVAL_REPORT_PATTERN.format(kind=kind), report)
    return report
