from stam.data.dataset import (
    DatasetManifest,
    TactileDataset,
    build_dataset,
    generate_dataset,
    load_batch,
    load_dataset,
    read_tseq,
    write_tseq,
)
from stam.data.render import (
    RenderParams,
    SequenceSample,
    detect_first_contact,
    generate_sequence,
    idle_frame,
    render_contact_frame,
)
from stam.data.texture import TextureClass, default_classes, generate_texture

__all__ = [
    "DatasetManifest", "TactileDataset", "build_dataset", "generate_dataset", "load_batch", "load_dataset",
    "read_tseq", "write_tseq", "RenderParams", "SequenceSample", "detect_first_contact",
    "generate_sequence", "idle_frame", "render_contact_frame", "TextureClass",
    "default_classes", "generate_texture",
]
