"""HTTP + Server-Sent Events control plane."""
