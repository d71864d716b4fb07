from .corpus import croppad_corpus, filter_corpus, kept_clips, manifest_path, reference_corpus, synth_corpus
from .croppad import FULL_SCALE_TARGET, crop_offsets, crop_pad, shift_boxes, union_box
from .filtering import FilterThresholds, filter_clip, filter_entry, motion_stats
from .frames_io import load_frames, save_frames
from .manifest import ClipManifest, Verdict, append_entries, read_manifests, write_manifests
from .reference import load_embedding, pick_reference, reference_index
from .synth import MOTION_PROFILES, Appearance, MotionScript, SynthClip, synth_clip

__all__ = [
    "MOTION_PROFILES",
    "FULL_SCALE_TARGET",
    "Appearance",
    "ClipManifest",
    "FilterThresholds",
    "MotionScript",
    "SynthClip",
    "Verdict",
    "append_entries",
    "crop_offsets",
    "crop_pad",
    "croppad_corpus",
    "filter_clip",
    "filter_corpus",
    "filter_entry",
    "kept_clips",
    "load_embedding",
    "load_frames",
    "manifest_path",
    "motion_stats",
    "pick_reference",
    "read_manifests",
    "reference_corpus",
    "reference_index",
    "save_frames",
    "shift_boxes",
    "synth_clip",
    "synth_corpus",
    "union_box",
    "write_manifests",
]
