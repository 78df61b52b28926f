/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Points with their truth categories, as JSON.
     */
    city(): string;
    /**
     * Truth-label grid map at `cell_m` and its weighted Moran's I at `threshold_m`.
     */
    grid(cell_m: number, threshold_m: number): string;
    image_size(): number;
    /**
     * Spatial-neighbor edges for `k` and `d_m`, plus the dedupe count at `eps_m`.
     */
    neighbors(k: number, d_m: number, eps_m: number): string;
    /**
     * Generates a synthetic city.
     */
    constructor(seed: bigint, zones: number, samples_per_zone: number, distractor_prob: number);
    /**
     * RGBA pixels of the `index`-th record's image, for a canvas.
     */
    thumbnail(index: number): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_city: (a: number) => [number, number];
    readonly demo_grid: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_image_size: (a: number) => number;
    readonly demo_neighbors: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly demo_thumbnail: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
