"""Multi-object scale-range learning from monocular clips.

Subpackages: geometry (transforms/rays), objectfield (factored radiance
fields), scalenet (validity network + sampler), compositor (scene-level
rendering), scenegen (synthetic data + oracle), trainer (two-stage
optimization), evalbench (metrics/protocols), interface/server (CLI + HTTP).
"""

__version__ = "0.1.0"
