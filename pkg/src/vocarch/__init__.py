"""Long-term voice features and nested mixed models for audio archives."""
