"""windseer: sparse-to-dense wind field reconstruction over terrain.

A measurement-conditioned 3D convolutional model predicts dense wind and
turbulence fields on regular grids from a handful of in-situ observations.
Subpackages cover grid handling (`gridcore`), synthetic training flows
(`synthflow`), geometric augmentation (`augment`), sparse input assembly
(`sparse`), the network (`net`), training (`train`), evaluation (`evalkit`),
field-data ingestion (`ingest`), airflow-sensor calibration (`calib`), and
the command line (`cli`).
"""

__version__ = "0.1.0"

from . import gridcore  # noqa: F401  (import order anchors the public API)

__all__ = ["gridcore", "__version__"]
