import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // e2e drives real child processes; keep files sequential so ports
    // and process lifetimes never overlap between test files.
    fileParallelism: false,
    testTimeout: 30000,
    hookTimeout: 30000,
  },
});
