"""Filament tracing in cryo-electron tomograms.

Dynamic-programming path density (:mod:`.dpcore`) drives two tracers:
:mod:`.spaghetti` for filaments along one dominant direction and
:mod:`.struwwel` for randomly oriented ones.  :mod:`.bundletrac`
follows hexagonally packed bundles from seeds, :mod:`.phantom`
simulates tomograms, :mod:`.metrics` scores traces and
:mod:`.helixfit` scores helix density against atomic models.
"""

__version__ = "0.1.0"
