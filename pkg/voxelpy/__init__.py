from voxelpy import (  # noqa: F401
    arithmetic,
    bitstream,
    codec,
    config,
    errors,
    nn,
    octree,
    partition,
    ply,
    pointcloud,
    synthetic,
    utils,
    voxeldnn,
)
