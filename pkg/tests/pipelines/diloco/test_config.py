# tests/pipelines/diloco/test_config.py

import pytest
from pydantic import ValidationError

from src.pipelines.diloco import NODE_LOCAL_FIELDS, MeshConfig, TrainerConfig


class TestTrainerConfig:
    """Validation and the fingerprint peers compare at registration."""

    def test_schedule_filled_from_round_counts(self):
        config = TrainerConfig(inner_steps=10, outer_steps=3)
        assert config.total_inner_steps == 30
        assert config.hyper.total_steps == 30

    def test_schedule_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="must equal"):
            TrainerConfig(inner_steps=10, outer_steps=3, hyper={"total_steps": 40})

    def test_checkpoint_every_needs_directory(self):
        with pytest.raises(ValidationError, match="checkpoint_dir"):
            TrainerConfig(checkpoint_every=2)
        config = TrainerConfig(checkpoint_every=2, checkpoint_dir="ckpt")
        assert config.checkpoint_every == 2

    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            TrainerConfig(inner_step=10)

    def test_fingerprint_ignores_node_local_fields(self):
        base = TrainerConfig()
        local = TrainerConfig(
            blocking_join=False, checkpoint_every=5, checkpoint_dir="elsewhere"
        )
        assert NODE_LOCAL_FIELDS == {
            "blocking_join",
            "checkpoint_every",
            "checkpoint_dir",
        }
        assert local.fingerprint() == base.fingerprint()

    def test_fingerprint_tracks_shared_fields(self):
        base = TrainerConfig()
        assert TrainerConfig(seed=1).fingerprint() != base.fingerprint()
        assert TrainerConfig(mode="int8").fingerprint() != base.fingerprint()
        assert TrainerConfig(inner_steps=50).fingerprint() != base.fingerprint()


class TestMeshConfig:
    def test_defaults(self):
        config = MeshConfig()
        assert config.max_retries == 3
        assert config.heartbeat_interval == 2.0
        assert config.heartbeat_timeout == 6.0

    def test_heartbeat_timeout_must_exceed_interval(self):
        with pytest.raises(ValidationError, match="heartbeat_timeout"):
            MeshConfig(heartbeat_interval=5.0, heartbeat_timeout=5.0)

    def test_frozen(self):
        config = MeshConfig()
        with pytest.raises(ValidationError):
            config.max_retries = 5
