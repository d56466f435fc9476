"""stub during build"""
