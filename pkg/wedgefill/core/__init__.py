# Core configuration, persistence and validation utilities
