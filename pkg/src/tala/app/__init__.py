"""Command line application: configuration, run modes and output."""
