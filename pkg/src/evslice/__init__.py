"""Spiking-neuron event slicing and open-vocabulary detection on event streams."""

__version__ = "0.1.0"
