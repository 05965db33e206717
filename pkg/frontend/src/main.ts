import { Api } from './api.js';
import { actionForKey } from './keymap.js';
import { Timeline } from './timeline.js';

const api = new Api('');
const timeline = new Timeline(api);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const runSelect = el<HTMLSelectElement>('run-select');
const viewSelect = el<HTMLSelectElement>('view-select');
const frameImg = el<HTMLImageElement>('frame');
const scrubber = el<HTMLInputElement>('scrubber');
const playBtn = el<HTMLButtonElement>('play');
const rateInput = el<HTMLInputElement>('rate');
const positionLabel = el<HTMLElement>('position');
const trackList = el<HTMLElement>('tracks');
const phaseLabelInput = el<HTMLInputElement>('phase-label');
const annotatorInput = el<HTMLInputElement>('annotator');
const saveBtn = el<HTMLButtonElement>('save');
const exportBtn = el<HTMLButtonElement>('export');
const revisionLabel = el<HTMLElement>('revision');
const banner = el<HTMLElement>('banner');
const conflictBox = el<HTMLElement>('conflict');
const mergeBtn = el<HTMLButtonElement>('merge');

let playTimer: number | null = null;

function showError(message: string): void {
  banner.textContent = message;
  banner.classList.remove('hidden');
}

function clearError(): void {
  banner.classList.add('hidden');
}

function fmtStamp(ns: number | null): string {
  return ns === null ? '-' : `${(ns / 1e6).toFixed(1)} ms`;
}

function render(): void {
  const n = timeline.packetCount;
  scrubber.max = String(Math.max(0, n - 1));
  scrubber.value = String(timeline.currentIndex);
  positionLabel.textContent = `${timeline.currentIndex + 1} / ${n}  (${fmtStamp(timeline.currentStamp)})`;
  playBtn.textContent = timeline.playing ? 'pause' : 'play';
  revisionLabel.textContent = `rev ${timeline.loadedRevision}${timeline.dirtyEdits ? ' +edits' : ''}`;
  saveBtn.disabled = !timeline.canSave;

  const view = viewSelect.value;
  if (view && n > 0) {
    frameImg.src = timeline.frameUrl(view);
  }
  renderTracks();
}

function renderTracks(): void {
  const stamps = timeline.run?.ref_stamps ?? [];
  const span = stamps.length > 1 ? stamps[stamps.length - 1] - stamps[0] : 1;
  const origin = stamps.length ? stamps[0] : 0;
  const pct = (ns: number) => `${(((ns - origin) / span) * 100).toFixed(2)}%`;

  trackList.innerHTML = '';
  for (const arm of timeline.arms) {
    const row = document.createElement('div');
    row.className = 'track';
    const name = document.createElement('span');
    name.className = 'track-name';
    const open = timeline.openContactStart(arm);
    name.textContent = open === null ? arm : `${arm} (open)`;
    const lane = document.createElement('div');
    lane.className = 'lane';
    for (const iv of timeline.pending.contact[arm] ?? []) {
      const seg = document.createElement('div');
      seg.className = iv.value ? 'seg on' : 'seg off';
      seg.style.left = pct(iv.start);
      seg.style.width = pct(iv.end - iv.start + origin);
      seg.title = `[${iv.start}, ${iv.end})`;
      lane.appendChild(seg);
    }
    row.append(name, lane);
    trackList.appendChild(row);
  }

  const phaseRow = document.createElement('div');
  phaseRow.className = 'track';
  const phaseName = document.createElement('span');
  phaseName.className = 'track-name';
  phaseName.textContent = timeline.openPhase === null ? 'phases' : 'phases (open)';
  const lane = document.createElement('div');
  lane.className = 'lane';
  for (const iv of timeline.pending.phases) {
    const seg = document.createElement('div');
    seg.className = 'seg phase';
    seg.style.left = pct(iv.start);
    seg.style.width = pct(iv.end - iv.start + origin);
    seg.title = `${iv.label} [${iv.start}, ${iv.end})`;
    seg.textContent = iv.label;
    lane.appendChild(seg);
  }
  phaseRow.append(phaseName, lane);
  trackList.appendChild(phaseRow);
}

function setPlaying(): void {
  if (playTimer !== null) {
    window.clearInterval(playTimer);
    playTimer = null;
  }
  if (timeline.playing) {
    const period = Math.max(20, 1000 / timeline.rateFps);
    playTimer = window.setInterval(() => {
      timeline.tick();
      render();
      if (!timeline.playing) setPlaying();
    }, period);
  }
}

async function loadRuns(): Promise<void> {
  const runs = await api.listRuns();
  runSelect.innerHTML = '';
  for (const run of runs) {
    const opt = document.createElement('option');
    opt.value = run.run_id;
    opt.textContent = `${run.run_id} (${run.recorder_mode}, ${run.packet_count} packets)`;
    runSelect.appendChild(opt);
  }
  if (runs.length) await loadRun(runs[0].run_id);
}

async function loadRun(runId: string): Promise<void> {
  try {
    await timeline.load(runId);
    clearError();
  } catch (err) {
    showError(err instanceof Error ? err.message : String(err));
    return; // failed loads leave the previous run on screen
  }
  viewSelect.innerHTML = '';
  for (const view of timeline.run?.streams.filter((s) => s.kind === 'image') ?? []) {
    const opt = document.createElement('option');
    opt.value = view.view ?? view.stream_id;
    opt.textContent = opt.value;
    viewSelect.appendChild(opt);
  }
  conflictBox.classList.add('hidden');
  render();
}

async function doSave(): Promise<void> {
  timeline.setAnnotator(annotatorInput.value);
  const result = await timeline.save();
  if (result.outcome === 'saved') {
    conflictBox.classList.add('hidden');
    clearError();
  } else if (result.outcome === 'conflict') {
    conflictBox.classList.remove('hidden');
  } else if (result.outcome === 'rejected') {
    showError(`save rejected: ${result.message}`);
  }
  render();
}

runSelect.addEventListener('change', () => void loadRun(runSelect.value));
viewSelect.addEventListener('change', render);
scrubber.addEventListener('input', () => {
  timeline.scrub(Number(scrubber.value));
  render();
});
playBtn.addEventListener('click', () => {
  timeline.togglePlay();
  setPlaying();
  render();
});
rateInput.addEventListener('change', () => {
  timeline.rateFps = Math.max(1, Number(rateInput.value) || 10);
  setPlaying();
});
saveBtn.addEventListener('click', () => void doSave());
mergeBtn.addEventListener('click', () => {
  void timeline.refreshAndMerge().then(() => {
    conflictBox.classList.add('hidden');
    render();
  });
});
exportBtn.addEventListener('click', () => {
  const blob = new Blob([timeline.exportJson()], { type: 'application/json' });
  const link = document.createElement('a');
  link.href = URL.createObjectURL(blob);
  link.download = `${timeline.runId || 'annotations'}.json`;
  link.click();
  URL.revokeObjectURL(link.href);
});

document.addEventListener('keydown', (event) => {
  if (event.target instanceof HTMLInputElement || event.target instanceof HTMLSelectElement) {
    return; // typing in a field should not drive the timeline
  }
  const action = actionForKey(event.key);
  if (!action) return;
  event.preventDefault();
  switch (action.kind) {
    case 'play_pause':
      timeline.togglePlay();
      setPlaying();
      break;
    case 'step':
      timeline.step(action.delta);
      break;
    case 'toggle_contact': {
      const arm = timeline.arms[action.armIndex];
      if (arm) timeline.toggleContact(arm);
      break;
    }
    case 'toggle_phase':
      timeline.togglePhase(phaseLabelInput.value.trim());
      break;
  }
  render();
});

void loadRuns().catch((err) => showError(err instanceof Error ? err.message : String(err)));
