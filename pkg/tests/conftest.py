import numpy as np
import pytest
from scipy.io import wavfile


@pytest.fixture
def write_wav(tmp_path):
    def _write(name, samples, rate, dtype=np.int16):
        path = tmp_path / name
        samples = np.asarray(samples)
        if dtype == np.int16:
            data = (np.clip(samples, -1, 1) * 32767).astype(np.int16)
        else:
            data = samples.astype(dtype)
        wavfile.write(path, rate, data)
        return path

    return _write


@pytest.fixture
def write_manifest(tmp_path):
    import json

    def _write(records, name="manifest.jsonl"):
        path = tmp_path / name
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        return path

    return _write
