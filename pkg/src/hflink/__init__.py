"""hflink - faster-than-real-time discrete-event simulator of HF radio data links.

The simulator models an HF bearer as four cooperating layers:

* an empirical burst-error generator that replays the run-length statistics
  of offline bit-error traces (`hflink.errormodel`),
* a modem transmit-time model (`hflink.modem`),
* a simplified half-duplex selective-repeat data link (`hflink.s5066`),
* a miniature TCP stack plus a TCP acceleration proxy (`hflink.transport`).

Everything runs on a deterministic integer-microsecond event kernel
(`hflink.kernel`); a command-line front end (`hflink.cli`) drives single
runs, SNR sweeps, trace/table utilities, and throughput calibration.
"""

__version__ = "0.1.0"
