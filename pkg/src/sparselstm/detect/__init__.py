"""Detection head, proposal propagation, box geometry and post-processing."""
