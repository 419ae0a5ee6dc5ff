import pytest

from trainer_service.model import TrainerEngine


def small_engine(**overrides) -> TrainerEngine:
    """Desk-scale engine: big enough to train, small enough for fast tests."""
    settings = dict(
        seed=7,
        embedding_size=32,
        num_layers=1,
        num_heads=2,
        context_length=1024,
        lora_rank=4,
        lora_alpha=8.0,
        max_new_tokens=12,
    )
    settings.update(overrides)
    return TrainerEngine(**settings)


@pytest.fixture
def engine() -> TrainerEngine:
    return small_engine()
