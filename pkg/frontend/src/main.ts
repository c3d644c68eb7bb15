/** Entry point: load the bundle named in the query string and build the UI. */
import { fetchReader, loadBundle } from "./bundle.js";
import { RigViewer } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showError(message: string): void {
  const box = el<HTMLDivElement>("error");
  box.textContent = message;
  box.style.display = "block";
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const bundleUrl = params.get("bundle") ?? "fixtures/bundle";
  let model;
  try {
    model = await loadBundle(fetchReader(bundleUrl));
  } catch (err) {
    showError(`Failed to load bundle "${bundleUrl}": ${(err as Error).message}`);
    return;
  }

  const viewer = new RigViewer(model, {
    canvas: el<HTMLCanvasElement>("view"),
    heatmap: el<HTMLCanvasElement>("heatmap"),
  });

  const sliders = el<HTMLDivElement>("sliders");
  const inputs: HTMLInputElement[] = [];
  for (let j = 0; j < model.manifest.blendshape_count; j++) {
    const row = document.createElement("label");
    row.className = "slider-row";
    const name = document.createElement("span");
    name.textContent = `shape ${j}`;
    const input = document.createElement("input");
    input.type = "range";
    input.min = "0";
    input.max = "1";
    input.step = "0.01";
    input.value = "0";
    const value = document.createElement("code");
    value.textContent = "0.00";
    input.addEventListener("input", () => {
      value.textContent = Number(input.value).toFixed(2);
      viewer.setAlpha(j, Number(input.value));
    });
    row.append(name, input, value);
    sliders.append(row);
    inputs.push(input);
  }

  const presets = el<HTMLDivElement>("presets");
  const neutralBtn = document.createElement("button");
  neutralBtn.textContent = "neutral";
  neutralBtn.addEventListener("click", () => applyPreset(new Array(inputs.length).fill(0)));
  presets.append(neutralBtn);
  model.keyWeights.forEach((weights, i) => {
    const btn = document.createElement("button");
    btn.textContent = `key ${i + 1}`;
    btn.addEventListener("click", () => applyPreset(weights));
    presets.append(btn);
  });

  function applyPreset(alpha: number[]): void {
    viewer.setPreset(alpha);
    viewer.alpha.forEach((a, j) => {
      inputs[j].value = a.toFixed(2);
      (inputs[j].nextElementSibling as HTMLElement).textContent = a.toFixed(2);
    });
  }

  el<HTMLInputElement>("wireframe").addEventListener("change", (e) => {
    viewer.setWireframe((e.target as HTMLInputElement).checked);
  });
  el<HTMLInputElement>("displace").addEventListener("change", (e) => {
    viewer.setDisplaceGeometry((e.target as HTMLInputElement).checked);
  });

  const stats = el<HTMLDivElement>("stats");
  viewer.onChange((ev) => {
    let lo = Infinity;
    let hi = -Infinity;
    for (const v of ev.blendedMap) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
    stats.textContent =
      `${model.manifest.vertex_count} verts, ${model.manifest.blendshape_count} shapes, ` +
      `map ${model.manifest.resolution}^2, blend range [${lo.toFixed(2)}, ${hi.toFixed(2)}] mm`;
  });
  viewer.update();
}

boot().catch((err) => showError(String(err)));
