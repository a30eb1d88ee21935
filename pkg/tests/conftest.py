import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pda.datagen import SyntheticShiftSpec, generate_synthetic  # noqa: E402
from pda.encoder import EncoderConfig, FrozenWeights  # noqa: E402
from pda.training import TrainConfig, UDADataset  # noqa: E402

TINY_ENCODER = EncoderConfig(d_model=8, n_layers=2, n_heads=2, d_proj=4, n_patches=3,
                             coupled_layers=1, context_length=2, d_ff=8)


@pytest.fixture(scope="session")
def tiny():
    """Small shifted 3-class problem with matching frozen weights."""
    spec = SyntheticShiftSpec(n_classes=3, n_source=6, n_target=6, d_in=8, n_patches=3, seed=1)
    ds = generate_synthetic(spec)
    weights = FrozenWeights.init(TINY_ENCODER, 3, ds.prototypes)
    data = UDADataset(ds.X_source, ds.y_source, ds.X_target, 3)
    config = TrainConfig(epochs=2, batch_size=8, shots=2, tau=0.5)
    return ds, weights, data, config
