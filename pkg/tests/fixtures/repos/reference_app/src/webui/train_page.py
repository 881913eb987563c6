import gradio as gr

from src.loading.adapter import load_adapter


def on_load_adapter(adapter_path):
    model = load_adapter(adapter_path)
    return f"Loaded {len(model)} tensors"


def build_page():
    with gr.Blocks() as page:
        path_box = gr.Textbox(label="Adapter path")
        button = gr.Button("Load adapter")
        button.click(on_load_adapter, inputs=path_box)
    return page
