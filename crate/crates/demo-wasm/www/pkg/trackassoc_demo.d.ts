/* tslint:disable */
/* eslint-disable */

/**
 * Scaled-down end-to-end run: synthesize a fleet, train a small predictor
 * per vessel, associate the held-out messages and score them.
 */
export function demo_run(seed: bigint, vessels: number, points: number, epochs: number, crossing: boolean): string;

/**
 * Great-circle distance in km on a 6371 km sphere.
 */
export function haversine_km(lat1: number, lon1: number, lat2: number, lon2: number): number;

/**
 * Parses a labelled AIS CSV and resamples each vessel onto a regular grid.
 * Returns `{vessels: [{id, raw: [[t, lat, lon]], grid: [[t, lat, lon]]}], skipped}`
 * with `t` in seconds since the vessel's first message.
 */
export function resample_preview(csv_text: string, period_secs: number): string;

/**
 * A synthetic CSV for the resampling explorer.
 */
export function sample_csv(seed: bigint, vessels: number, points: number, jitter: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly demo_run: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly haversine_km: (a: number, b: number, c: number, d: number) => number;
    readonly resample_preview: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sample_csv: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
