import numpy as np
import pytest

from prvrlab.data import SynthConfig, gen_synthetic
from prvrlab.encoders import EncoderConfig, init_encoder
from prvrlab.merging import MergeConfig
from prvrlab.train import make_batch, prepare_clips

# small merge settings so a 24-frame video still walks a multi-level schedule
TINY_MERGE = MergeConfig(merge_rate=75, clip_target=8, c_min=3, tau=0.3, mode="monotone")


def tiny_dataset(seed=0, n_videos=2, frames=24, d=8, queries=2, events=2, noise=0.3):
    cfg = SynthConfig(n_videos=n_videos, frames_per_video=frames, events_per_video=events,
                      queries_per_video=queries, d_v=d, d_q=d, noise_std=noise, seed=seed, words_per_query=4)
    return gen_synthetic(cfg)


def tiny_batch(seed=0, merge=TINY_MERGE, d_model=12):
    """2 videos, 4 queries, float64 encoder."""
    ds = tiny_dataset(seed)
    clips = prepare_clips(ds, merge)
    batch = make_batch(ds, clips, list(range(len(ds.queries))))
    cfg = EncoderConfig(d_q=ds.d_q, d_v=ds.d_v, d=d_model, n_layers=1, n_heads=2, mlp_ratio=2,
                        max_text_len=4, max_frames=24, max_clips=merge.clip_target)
    return batch, init_encoder(cfg, seed=seed), ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
