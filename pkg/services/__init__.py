"""I/O services used by the command line: dataset CSVs, run outputs and SVG charts."""
