"""
Stop-sign behavior analytics for drivers with and without type 1 diabetes:
naturalistic telemetry, CGM glucose state and object detections in, fitted
mixed-effects models and influence diagnostics out.
"""
