"""nilmprune: seq2seq CNN energy disaggregation with a full pruning stack.

Library layout:

* ``tensor`` / ``kernels``: autodiff core and the conv kernels beneath it
* ``model``: the disaggregator chain, training loop, accounting, model files
* ``pruning``: magnitude masks and the iterative pre-training scheme
* ``depgraph``: dependency-graph structured pruning and profile-guided removal
* ``metrics``: disaggregation metrics, on/off extraction, compression metrics
* ``sweep``: threshold sweeps and the distance-to-ideal selector
* ``data``: CSV ingestion, cleaning pipeline, windowing, synthetic households
* ``experiment`` / ``cli``: orchestration and the ``nilmprune`` command
"""

__version__ = "0.1.0"
