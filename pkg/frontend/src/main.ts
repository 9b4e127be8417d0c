import { ApiClient } from "./api.js";
import { Axis, sliceDims, sliceCount } from "./coords.js";
import { ViewerState, renderSlice } from "./viewer.js";

const client = new ApiClient("");
const state = new ViewerState(client);

const canvas = document.getElementById("slice") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const volumeInput = document.getElementById("volume-id") as HTMLInputElement;
const openBtn = document.getElementById("open") as HTMLButtonElement;
const axisSel = document.getElementById("axis") as HTMLSelectElement;
const indexSlider = document.getElementById("index") as HTMLInputElement;
const overlayChk = document.getElementById("overlay") as HTMLInputElement;
const status = document.getElementById("status") as HTMLElement;

let busy = false; // single active request per session

async function refresh(): Promise<void> {
  if (!state.sessionId) return;
  const { rows, cols } = sliceDims(state.shape, state.axis);
  canvas.width = cols * state.zoom;
  canvas.height = rows * state.zoom;
  const slice = await state.fetchSlice();
  renderSlice(ctx, state, slice);
  const dsc = state.dsc !== null ? ` | DSC ${state.dsc.toFixed(4)}` : "";
  status.textContent =
    `axis ${state.axis} slice ${state.index} | prompts ${state.promptCount()}${dsc}`;
}

openBtn.addEventListener("click", async () => {
  try {
    await state.open(volumeInput.value.trim());
    indexSlider.max = String(sliceCount(state.shape, state.axis) - 1);
    indexSlider.value = String(state.index);
    await refresh();
  } catch (e) {
    status.textContent = String(e);
  }
});

canvas.addEventListener("click", async (ev) => {
  if (busy || !state.sessionId) return;
  const rect = canvas.getBoundingClientRect();
  const polarity = ev.shiftKey || ev.ctrlKey ? "negative" : "positive";
  const prompt = state.clickToPrompt(ev.clientX - rect.left, ev.clientY - rect.top, polarity);
  if (prompt === null) return; // outside image bounds: no request
  busy = true;
  try {
    await state.sendPrompt(prompt);
    await refresh();
  } catch (e) {
    status.textContent = String(e);
  } finally {
    busy = false;
  }
});

canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

canvas.addEventListener("wheel", async (ev) => {
  ev.preventDefault();
  state.scrub(ev.deltaY > 0 ? 1 : -1);
  indexSlider.value = String(state.index);
  await refresh();
});

axisSel.addEventListener("change", async () => {
  state.setAxis(Number(axisSel.value) as Axis);
  indexSlider.max = String(sliceCount(state.shape, state.axis) - 1);
  indexSlider.value = String(state.index);
  await refresh();
});

indexSlider.addEventListener("input", async () => {
  state.index = Number(indexSlider.value);
  await refresh();
});

overlayChk.addEventListener("change", async () => {
  state.showOverlay = overlayChk.checked;
  await refresh(); // served from cache; no refetch
});
