"""Test suite for Mask Volume Synth."""
