"""Model-bound embedding exporter for the vocalign pipeline.

Everything that knows about checkpoints, preprocessing, or encoders lives
here; the consuming pipeline only ever sees EMB1 files, vocabulary files, and
manifests.
"""

__version__ = "0.1.0"


class ExportError(Exception):
    pass
