import { describe, expect, it } from 'vitest';

import { ApiError } from '../src/api.js';
import { Timeline } from '../src/timeline.js';
import type { ApiLike } from '../src/timeline.js';
import type { AnnotationSet, RunDetail } from '../src/types.js';
import { emptyAnnotations } from '../src/types.js';

const MS = 1_000_000;

function makeRun(stampCount: number): RunDetail {
  return {
    run_id: 'r1',
    recorder_mode: 'online',
    created_at_ns: 0,
    streams: [
      { stream_id: 'cam', kind: 'image', nominal_rate_hz: 10, arity: 0, view: 'cam' },
      { stream_id: 'left_grip', kind: 'latched_numeric', nominal_rate_hz: 50, arity: 1 },
      { stream_id: 'right_grip', kind: 'latched_numeric', nominal_rate_hz: 50, arity: 1 },
    ],
    packet_count: stampCount,
    reject_count: 0,
    drop_count: 0,
    ref_stamps: Array.from({ length: stampCount }, (_, i) => i * 100 * MS),
    sync_config: {},
    schedule: null,
    dirty: false,
    warnings: [],
  };
}

/** In-memory stand-in for the HTTP client with the server's revision rule. */
class FakeApi implements ApiLike {
  stored: AnnotationSet = emptyAnnotations();
  failGetRun = false;
  putDelay: (() => Promise<void>) | null = null;
  lastPut: AnnotationSet | null = null;

  constructor(public run: RunDetail = makeRun(5)) {}

  async getRun(runId: string): Promise<RunDetail> {
    if (this.failGetRun) throw new ApiError(404, 'run_not_found', `no run ${runId}`);
    return this.run;
  }

  async getAnnotations(): Promise<AnnotationSet> {
    return JSON.parse(JSON.stringify(this.stored)) as AnnotationSet;
  }

  async putAnnotations(_runId: string, set: AnnotationSet): Promise<AnnotationSet> {
    if (this.putDelay) await this.putDelay();
    this.lastPut = set;
    if (set.revision !== this.stored.revision) {
      throw new ApiError(409, 'revision_conflict', `based on ${set.revision}`);
    }
    this.stored = JSON.parse(JSON.stringify({ ...set, revision: set.revision + 1 }));
    return JSON.parse(JSON.stringify(this.stored)) as AnnotationSet;
  }

  frameUrl(runId: string, view: string, index: number): string {
    return `/runs/${runId}/frames/${view}/${index}`;
  }
}

async function loaded(api = new FakeApi()): Promise<Timeline> {
  const t = new Timeline(api);
  await t.load('r1');
  return t;
}

describe('load', () => {
  it('initializes position, arms, and revision', async () => {
    const t = await loaded();
    expect(t.currentIndex).toBe(0);
    expect(t.packetCount).toBe(5);
    expect(t.arms).toEqual(['left_grip', 'right_grip']);
    expect(t.loadedRevision).toBe(0);
    expect(t.canSave).toBe(true);
  });

  it('leaves previous state intact when the fetch fails', async () => {
    const api = new FakeApi();
    const t = await loaded(api);
    t.scrub(3);
    api.failGetRun = true;
    await expect(t.load('other')).rejects.toThrow('no run other');
    expect(t.runId).toBe('r1');
    expect(t.currentIndex).toBe(3);
  });

  it('falls back to default arm names without latched streams', async () => {
    const api = new FakeApi();
    api.run = { ...makeRun(3), streams: [api.run.streams[0]] };
    const t = await loaded(api);
    expect(t.arms).toEqual(['psm1', 'psm2']);
  });
});

describe('playback', () => {
  it('clamps scrubbing to the packet range', async () => {
    const t = await loaded();
    t.scrub(99);
    expect(t.currentIndex).toBe(4);
    t.scrub(-7);
    expect(t.currentIndex).toBe(0);
  });

  it('steps and reports the current stamp', async () => {
    const t = await loaded();
    t.step(2);
    expect(t.currentStamp).toBe(200 * MS);
    t.step(-5);
    expect(t.currentIndex).toBe(0);
  });

  it('advances on tick and pauses at the last frame', async () => {
    const t = await loaded();
    t.togglePlay();
    expect(t.playing).toBe(true);
    const seen: number[] = [];
    for (let i = 0; i < 10; i++) {
      t.tick();
      seen.push(t.currentIndex);
    }
    expect(seen.slice(0, 4)).toEqual([1, 2, 3, 4]);
    expect(t.playing).toBe(false);
    expect(t.currentIndex).toBe(4);
  });

  it('will not start playing a single-frame run', async () => {
    const api = new FakeApi(makeRun(1));
    const t = await loaded(api);
    t.togglePlay();
    expect(t.playing).toBe(false);
  });
});

describe('contact and phase toggles', () => {
  it('opens then closes an interval across two stamps', async () => {
    const t = await loaded();
    expect(t.toggleContact('left_grip')).toBe('opened');
    expect(t.openContactStart('left_grip')).toBe(0);
    t.scrub(2);
    expect(t.toggleContact('left_grip')).toBe('closed');
    expect(t.pending.contact.left_grip).toEqual([{ start: 0, end: 200 * MS, value: true }]);
    expect(t.dirtyEdits).toBe(1);
  });

  it('orders endpoints when closed earlier than opened', async () => {
    const t = await loaded();
    t.scrub(3);
    t.toggleContact('left_grip');
    t.scrub(1);
    expect(t.toggleContact('left_grip')).toBe('closed');
    expect(t.pending.contact.left_grip).toEqual([
      { start: 100 * MS, end: 300 * MS, value: true },
    ]);
  });

  it('discards a double toggle on the same stamp', async () => {
    const t = await loaded();
    t.toggleContact('left_grip');
    expect(t.toggleContact('left_grip')).toBe('discarded');
    expect(t.pending.contact.left_grip).toBeUndefined();
    expect(t.dirtyEdits).toBe(0);
  });

  it('reports no_frame before a run is loaded', () => {
    const t = new Timeline(new FakeApi());
    expect(t.toggleContact('left_grip')).toBe('no_frame');
    expect(t.togglePhase('x')).toBe('no_frame');
  });

  it('tracks phases independently of contacts', async () => {
    const t = await loaded();
    expect(t.togglePhase('dissect')).toBe('opened');
    expect(t.openPhase).toBe(0);
    t.scrub(4);
    expect(t.togglePhase('dissect')).toBe('closed');
    expect(t.pending.phases).toEqual([{ start: 0, end: 400 * MS, label: 'dissect' }]);
  });

  it('never leaves pending in an invalid state while editing', async () => {
    const t = await loaded();
    const arms = ['left_grip', 'right_grip'];
    for (let i = 0; i < 40; i++) {
      t.scrub(i % 5);
      t.toggleContact(arms[i % 2]);
      t.togglePhase(i % 3 === 0 ? 'a' : 'b');
      expect(t.validationProblems()).toEqual([]);
    }
  });
});

describe('save', () => {
  async function withOneEdit(api = new FakeApi()): Promise<Timeline> {
    const t = await loaded(api);
    t.toggleContact('left_grip');
    t.scrub(2);
    t.toggleContact('left_grip');
    return t;
  }

  it('stores the set and adopts the new revision', async () => {
    const api = new FakeApi();
    const t = await withOneEdit(api);
    t.setAnnotator('carol');
    const result = await t.save();
    expect(result).toEqual({ outcome: 'saved', revision: 1 });
    expect(t.loadedRevision).toBe(1);
    expect(t.dirtyEdits).toBe(0);
    expect(api.stored.contact.left_grip).toHaveLength(1);
    expect(api.stored.annotator).toBe('carol');
  });

  it('always sends the revision the edits were based on', async () => {
    const api = new FakeApi();
    const t = await withOneEdit(api);
    await t.save();
    expect(api.lastPut?.revision).toBe(0);
    t.scrub(3);
    t.toggleContact('right_grip');
    t.scrub(4);
    t.toggleContact('right_grip');
    await t.save();
    expect(api.lastPut?.revision).toBe(1);
    expect(t.loadedRevision).toBe(2);
  });

  it('allows only one in-flight save', async () => {
    const api = new FakeApi();
    let release: () => void = () => undefined;
    api.putDelay = () => new Promise((resolve) => (release = resolve));
    const t = await withOneEdit(api);
    const first = t.save();
    const second = await t.save();
    expect(second).toEqual({ outcome: 'busy' });
    release();
    expect(await first).toEqual({ outcome: 'saved', revision: 1 });
  });

  it('surfaces a stale revision as a conflict and keeps the edits', async () => {
    const api = new FakeApi();
    const t = await withOneEdit(api);
    api.stored.revision = 3; // someone else saved in the meantime
    const result = await t.save();
    expect(result.outcome).toBe('conflict');
    expect(t.pending.contact.left_grip).toHaveLength(1);
    expect(t.loadedRevision).toBe(0);
    expect(t.dirtyEdits).toBe(1);
  });

  it('merges the server copy and then saves cleanly', async () => {
    const api = new FakeApi();
    const t = await withOneEdit(api);
    api.stored = {
      contact: { right_grip: [{ start: 0, end: 50 * MS, value: true }] },
      phases: [],
      annotator: 'alice',
      revision: 3,
    };
    expect((await t.save()).outcome).toBe('conflict');
    await t.refreshAndMerge();
    expect(t.loadedRevision).toBe(3);
    expect(t.pending.contact.right_grip).toHaveLength(1);
    expect(t.pending.contact.left_grip).toHaveLength(1);
    expect(await t.save()).toEqual({ outcome: 'saved', revision: 4 });
  });

  it('rejects locally when the pending set is invalid', async () => {
    const t = await loaded();
    t.pending.phases = [{ start: 9, end: 3, label: 'broken' }];
    expect(t.canSave).toBe(false);
    const result = await t.save();
    expect(result.outcome).toBe('rejected');
    if (result.outcome === 'rejected') {
      expect(result.message).toContain('phases');
    }
  });

  it('maps a server 422 to rejected', async () => {
    const api = new FakeApi();
    api.putAnnotations = async () => {
      throw new ApiError(422, 'invalid_annotations', 'bad intervals');
    };
    const t = await withOneEdit(api);
    expect(await t.save()).toEqual({ outcome: 'rejected', message: 'bad intervals' });
  });

  it('rethrows unexpected errors', async () => {
    const api = new FakeApi();
    api.putAnnotations = async () => {
      throw new ApiError(500, 'internal_error', 'boom');
    };
    const t = await withOneEdit(api);
    await expect(t.save()).rejects.toThrow('boom');
  });
});

describe('reload and export', () => {
  it('reloadAnnotations drops local edits', async () => {
    const api = new FakeApi();
    const t = await loaded(api);
    t.toggleContact('left_grip');
    t.scrub(1);
    t.toggleContact('left_grip');
    await t.reloadAnnotations();
    expect(t.pending.contact).toEqual({});
    expect(t.dirtyEdits).toBe(0);
  });

  it('exportJson round-trips through JSON.parse', async () => {
    const t = await loaded();
    t.togglePhase('x');
    t.scrub(1);
    t.togglePhase('x');
    const parsed = JSON.parse(t.exportJson()) as AnnotationSet;
    expect(parsed.phases).toEqual([{ start: 0, end: 100 * MS, label: 'x' }]);
  });
});
