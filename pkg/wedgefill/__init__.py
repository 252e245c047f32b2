# Limited-angle sinogram inpainting workbench
__version__ = "1.0.0"
